#include "bimamba/train.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <thread>

#include "bimamba/metrics.hpp"

namespace bimamba::train {

AdamW::AdamW(std::vector<model::NamedParam> params, const TrainConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
    for (const auto& np : params_) {
        m_.push_back(Tensor::zeros(np.tensor.shape(), np.tensor.dtype()));
        v_.push_back(Tensor::zeros(np.tensor.shape(), np.tensor.dtype()));
    }
}

void AdamW::zero_grads() {
    for (auto& np : params_) np.tensor.zero_grad();
}

void AdamW::step(double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

    double clip_scale = 1.0;
    if (cfg_.grad_clip > 0) {
        double sq = 0;
        for (auto& np : params_) {
            if (!np.tensor.has_grad()) continue;
            for (double g : np.tensor.grad().to_vector()) sq += g * g;
        }
        double norm = std::sqrt(sq);
        if (norm > cfg_.grad_clip) clip_scale = cfg_.grad_clip / norm;
    }

    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& t = params_[pi].tensor;
        bool decay = params_[pi].decay;
        auto apply = [&](auto tag) {
            using T = decltype(tag);
            auto theta = t.mutable_data<T>();
            auto m = m_[pi].mutable_data<T>();
            auto v = v_[pi].mutable_data<T>();
            const T* g = t.has_grad() ? t.impl()->grad->ptr<T>() : nullptr;
            for (std::size_t i = 0; i < theta.size(); ++i) {
                double gi = g ? static_cast<double>(g[i]) * clip_scale : 0.0;
                if (decay && cfg_.weight_decay > 0)
                    theta[i] = static_cast<T>(static_cast<double>(theta[i]) -
                                              lr * cfg_.weight_decay *
                                                  static_cast<double>(theta[i]));
                double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * gi;
                double vi = cfg_.beta2 * static_cast<double>(v[i]) +
                            (1.0 - cfg_.beta2) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
                theta[i] = static_cast<T>(static_cast<double>(theta[i]) - lr * update);
            }
        };
        if (t.dtype() == Dtype::Float32) apply(float{});
        else apply(double{});
    }
}

double cosine_lr(i64 step, i64 total_steps, double lr_init) {
    if (total_steps < 1) throw ContractError("cosine_lr: total_steps must be >= 1");
    if (step < 0 || step > total_steps)
        throw ContractError("cosine_lr: step outside [0, total_steps]");
    if (step == total_steps) return 0.0;
    double x = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr_init * 0.5 * (1.0 + std::cos(3.141592653589793238462643383279 * x));
}

double evaluate_auroc(const model::ModelParams& params, const model::ModelConfig& cfg,
                      const data::Dataset& dataset, const std::string& split) {
    NoGradGuard ng;
    model::ModelConfig ecfg = cfg;          // inference runs the streaming scan
    ecfg.scan = ssm::ScanMode::Sequential;
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t idx : dataset.split_indices(split)) {
        const data::LabeledSample& s = dataset.samples[idx];
        Tensor u = data::image_to_tensor(s.frontal, ecfg.dtype);
        Tensor v = data::image_to_tensor(s.lateral, ecfg.dtype);
        scores.push_back(model::predict(params, ecfg, u, v).probability);
        labels.push_back(s.label);
    }
    return metrics::auroc(scores, labels);
}

TrainResult train_loop(model::ModelParams& params, const model::ModelConfig& cfg,
                       const data::Dataset& dataset, const TrainConfig& tc,
                       const std::string& checkpoint_path, std::ostream* log) {
    tc.validate();
    cfg.validate();
    auto train_idx = dataset.split_indices("train");
    auto val_idx = dataset.split_indices("val");
    if (train_idx.empty() || val_idx.empty())
        throw ContractError("train_loop: train and val splits must be nonempty");

    i64 n_train = static_cast<i64>(train_idx.size());
    i64 steps_per_epoch = (n_train + tc.batch_size - 1) / tc.batch_size;
    i64 total_steps = tc.epochs * steps_per_epoch;

    AdamW opt(params.named(), tc);
    TrainResult result;
    i64 step = 0;
    // worker threads each run serial kernels; no nested parallelism
    ThreadCountGuard kernel_threads(tc.workers > 1 ? 1 : thread_count());

    for (i64 epoch = 0; epoch < tc.epochs; ++epoch) {
        std::vector<std::size_t> order = train_idx;
        {
            Rng shuffle_rng(mix_seed(tc.seed, 0x5E00 + static_cast<u64>(epoch)));
            for (i64 i = static_cast<i64>(order.size()) - 1; i > 0; --i)
                std::swap(order[static_cast<std::size_t>(i)],
                          order[static_cast<std::size_t>(shuffle_rng.below(i + 1))]);
        }

        double loss_sum = 0;
        double epoch_lr = tc.lr;
        i64 batch_index = 0;
        for (i64 at = 0; at < n_train; at += tc.batch_size, ++batch_index) {
            i64 batch_n = std::min<i64>(tc.batch_size, n_train - at);
            opt.zero_grads();
            double lr = cosine_lr(step, total_steps, tc.lr);
            if (tc.warmup_steps > 0 && step < tc.warmup_steps)
                lr *= static_cast<double>(step + 1) / static_cast<double>(tc.warmup_steps);

            // one sample's forward/backward against a parameter view
            auto run_sample = [&](const model::ModelParams& view, i64 bi) {
                const data::LabeledSample& base =
                    dataset.samples[order[static_cast<std::size_t>(at + bi)]];
                data::LabeledSample aug = base;
                if (tc.augment) {
                    Rng arng(mix_seed(mix_seed(tc.seed, 0xA7000 + static_cast<u64>(epoch)),
                                      hash_string(base.subject_id)));
                    aug = data::augment(base, arng);
                }
                try {
                    Tensor u = data::image_to_tensor(aug.frontal, cfg.dtype);
                    Tensor v = data::image_to_tensor(aug.lateral, cfg.dtype);
                    model::Prediction pred = model::predict(view, cfg, u, v);
                    Tensor loss = model::bce_loss(pred, aug.label);
                    double value = loss.at(0);
                    backward(scale(loss, 1.0 / static_cast<double>(batch_n)));
                    reset_graph();
                    return value;
                } catch (const NumericError& e) {
                    reset_graph();
                    throw NumericError("train_loop: non-finite loss at epoch " +
                                       std::to_string(epoch) + " batch " +
                                       std::to_string(batch_index) + ": " + e.what());
                }
            };

            i64 workers = std::min<i64>(tc.workers, batch_n);
            if (workers <= 1) {
                for (i64 bi = 0; bi < batch_n; ++bi) loss_sum += run_sample(params, bi);
            } else {
                // each extra worker backpropagates into its own parameter
                // copy; one aggregator then folds the copies' gradients in
                // a fixed order, keeping the batch gradient reproducible
                std::vector<model::ModelParams> views;
                for (i64 w = 1; w < workers; ++w) views.push_back(params.clone());
                std::vector<double> partial(static_cast<std::size_t>(workers), 0.0);
                std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
                auto chunk = [&](i64 w) {
                    return std::pair<i64, i64>{w * batch_n / workers,
                                               (w + 1) * batch_n / workers};
                };
                std::vector<std::thread> pool;
                for (i64 w = 1; w < workers; ++w) {
                    pool.emplace_back([&, w]() {
                        try {
                            auto [lo, hi] = chunk(w);
                            for (i64 bi = lo; bi < hi; ++bi)
                                partial[static_cast<std::size_t>(w)] +=
                                    run_sample(views[static_cast<std::size_t>(w - 1)], bi);
                        } catch (...) {
                            errors[static_cast<std::size_t>(w)] = std::current_exception();
                        }
                    });
                }
                try {
                    auto [lo, hi] = chunk(0);
                    for (i64 bi = lo; bi < hi; ++bi)
                        partial[0] += run_sample(params, bi);
                } catch (...) {
                    errors[0] = std::current_exception();
                }
                for (auto& t : pool) t.join();
                for (auto& err : errors)
                    if (err) std::rethrow_exception(err);
                for (i64 w = 0; w < workers; ++w)
                    loss_sum += partial[static_cast<std::size_t>(w)];
                auto main_named = params.named();
                for (i64 w = 1; w < workers; ++w) {
                    auto view_named = views[static_cast<std::size_t>(w - 1)].named();
                    for (std::size_t pi = 0; pi < main_named.size(); ++pi) {
                        if (!view_named[pi].tensor.has_grad()) continue;
                        Tensor& dst = main_named[pi].tensor;
                        Tensor src = view_named[pi].tensor.grad();
                        auto fold = [&](auto tag) {
                            using T = decltype(tag);
                            detail::Storage* g = dst.impl()->grad
                                                     ? dst.impl()->grad.get()
                                                     : nullptr;
                            if (!g) {
                                dst.impl()->grad = std::make_shared<detail::Storage>(
                                    dst.dtype(), dst.numel(), true);
                                g = dst.impl()->grad.get();
                            }
                            T* gp = g->ptr<T>();
                            auto sp = src.data<T>();
                            for (i64 i = 0; i < dst.numel(); ++i) gp[i] += sp[i];
                        };
                        if (dst.dtype() == Dtype::Float32) fold(float{});
                        else fold(double{});
                    }
                }
            }
            opt.step(lr);
            epoch_lr = lr;
            ++step;
        }

        double val_auroc = evaluate_auroc(params, cfg, dataset, "val");
        EpochRow row{epoch, loss_sum / static_cast<double>(n_train), val_auroc, epoch_lr};
        result.history.push_back(row);
        if (log)
            (*log) << "epoch " << epoch << " train_loss " << row.train_loss << " val_auroc "
                   << row.val_auroc << " lr " << row.lr << "\n";
        if (val_auroc > result.best_val_auroc) {
            result.best_val_auroc = val_auroc;
            result.best_epoch = epoch;
            if (!checkpoint_path.empty()) model::save_checkpoint(checkpoint_path, cfg, params);
        }
    }
    return result;
}

void write_history_csv(const std::string& path, const std::vector<EpochRow>& history) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("history: cannot open '" + path + "' for writing");
    f << "epoch,train_loss,val_auroc,lr\n";
    char buf[160];
    for (const EpochRow& r : history) {
        std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g\n",
                      static_cast<long long>(r.epoch), r.train_loss, r.val_auroc, r.lr);
        f << buf;
    }
}

}  // namespace bimamba::train
