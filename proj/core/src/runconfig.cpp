#include "bimamba/runconfig.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace bimamba::config {

const std::vector<KeyDoc>& known_keys() {
    static const std::vector<KeyDoc> keys = {
        {"image_size", "square input image side (default 64)"},
        {"patch_size", "patch side P (default 8)"},
        {"embed_dim", "token embedding width D (default 64)"},
        {"expand_dim", "expanded width E inside a block, must exceed D (default 128)"},
        {"state_dim", "recurrent state size N (default 8)"},
        {"blocks", "number of stacked blocks M (default 4)"},
        {"conv_width", "causal convolution width K (default 4)"},
        {"heads", "attention heads for the comparator block (default 4)"},
        {"fusion", "input_patch_concat | cls_token_concat | single_frontal | single_lateral"},
        {"residual_mode", "single | literal_paper"},
        {"discretization", "multiplication | exponential"},
        {"norm", "rms | layer"},
        {"scan", "parallel | sequential"},
        {"dtype", "float32 | float64"},
        {"lr", "initial learning rate (default 5e-6)"},
        {"weight_decay", "decoupled weight decay (default 1e-8)"},
        {"batch_size", "samples per optimizer step (default 24)"},
        {"epochs", "training epochs (default 30)"},
        {"beta1", "first moment decay (default 0.9)"},
        {"beta2", "second moment decay (default 0.999)"},
        {"eps", "adaptive denominator floor (default 1e-8)"},
        {"seed", "master random seed; required wherever randomness exists"},
        {"augment", "true | false, random crop and flip during training (default true)"},
        {"warmup_steps", "linear warmup steps, 0 disables (default 0)"},
        {"grad_clip", "global gradient norm clip, 0 disables (default 0)"},
        {"workers", "batch evaluation threads, gradients merged deterministically (default 2)"},
    };
    return keys;
}

namespace {

i64 parse_i64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        i64 out = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ContractError("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

double parse_f64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        double out = std::stod(v, &used);
        if (used != v.size() || !std::isfinite(out)) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ContractError("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ContractError("config: key '" + key + "' expects true or false, got '" + v + "'");
}

std::string fmt_f64(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

void apply_kv(RunConfig& rc, const std::string& key, const std::string& value) {
    if (key == "image_size") {
        rc.model.height = rc.model.width = parse_i64(key, value);
    } else if (key == "patch_size") rc.model.patch = parse_i64(key, value);
    else if (key == "embed_dim") rc.model.embed_dim = parse_i64(key, value);
    else if (key == "expand_dim") rc.model.expand_dim = parse_i64(key, value);
    else if (key == "state_dim") rc.model.state_dim = parse_i64(key, value);
    else if (key == "blocks") rc.model.blocks = parse_i64(key, value);
    else if (key == "conv_width") rc.model.conv_width = parse_i64(key, value);
    else if (key == "heads") rc.heads = parse_i64(key, value);
    else if (key == "fusion") rc.model.fusion = model::fusion_from_name(value);
    else if (key == "residual_mode") rc.model.residual = model::residual_from_name(value);
    else if (key == "discretization")
        rc.model.discretization = model::discretization_from_name(value);
    else if (key == "norm") rc.model.norm = model::norm_from_name(value);
    else if (key == "scan") rc.model.scan = model::scan_from_name(value);
    else if (key == "dtype") rc.model.dtype = model::dtype_from_name(value);
    else if (key == "lr") rc.train.lr = parse_f64(key, value);
    else if (key == "weight_decay") rc.train.weight_decay = parse_f64(key, value);
    else if (key == "batch_size") rc.train.batch_size = parse_i64(key, value);
    else if (key == "epochs") rc.train.epochs = parse_i64(key, value);
    else if (key == "beta1") rc.train.beta1 = parse_f64(key, value);
    else if (key == "beta2") rc.train.beta2 = parse_f64(key, value);
    else if (key == "eps") rc.train.eps = parse_f64(key, value);
    else if (key == "seed") {
        rc.train.seed = static_cast<u64>(parse_i64(key, value));
        rc.has_seed = true;
    } else if (key == "augment") rc.train.augment = parse_bool(key, value);
    else if (key == "warmup_steps") rc.train.warmup_steps = parse_i64(key, value);
    else if (key == "grad_clip") rc.train.grad_clip = parse_f64(key, value);
    else if (key == "workers") rc.train.workers = parse_i64(key, value);
    else throw ContractError("config: unknown key '" + key + "'");
}

RunConfig parse_text(const std::string& text, const std::string& origin) {
    RunConfig rc;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ContractError("config: " + origin + " line " + std::to_string(lineno) +
                                " is not 'key = value'");
        apply_kv(rc, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return rc;
}

RunConfig parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("config: cannot open '" + path + "'");
    std::ostringstream os;
    os << f.rdbuf();
    return parse_text(os.str(), path);
}

std::string dump(const RunConfig& rc) {
    std::ostringstream os;
    os << "image_size = " << rc.model.height << "\n";
    os << "patch_size = " << rc.model.patch << "\n";
    os << "embed_dim = " << rc.model.embed_dim << "\n";
    os << "expand_dim = " << rc.model.expand_dim << "\n";
    os << "state_dim = " << rc.model.state_dim << "\n";
    os << "blocks = " << rc.model.blocks << "\n";
    os << "conv_width = " << rc.model.conv_width << "\n";
    os << "heads = " << rc.heads << "\n";
    os << "fusion = " << model::fusion_name(rc.model.fusion) << "\n";
    os << "residual_mode = " << model::residual_name(rc.model.residual) << "\n";
    os << "discretization = " << model::discretization_name(rc.model.discretization) << "\n";
    os << "norm = " << model::norm_name(rc.model.norm) << "\n";
    os << "scan = " << model::scan_name(rc.model.scan) << "\n";
    os << "dtype = " << model::dtype_token(rc.model.dtype) << "\n";
    os << "lr = " << fmt_f64(rc.train.lr) << "\n";
    os << "weight_decay = " << fmt_f64(rc.train.weight_decay) << "\n";
    os << "batch_size = " << rc.train.batch_size << "\n";
    os << "epochs = " << rc.train.epochs << "\n";
    os << "beta1 = " << fmt_f64(rc.train.beta1) << "\n";
    os << "beta2 = " << fmt_f64(rc.train.beta2) << "\n";
    os << "eps = " << fmt_f64(rc.train.eps) << "\n";
    if (rc.has_seed) os << "seed = " << rc.train.seed << "\n";
    os << "augment = " << (rc.train.augment ? "true" : "false") << "\n";
    os << "warmup_steps = " << rc.train.warmup_steps << "\n";
    os << "grad_clip = " << fmt_f64(rc.train.grad_clip) << "\n";
    os << "workers = " << rc.train.workers << "\n";
    return os.str();
}

}  // namespace bimamba::config
