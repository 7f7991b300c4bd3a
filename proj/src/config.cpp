#include "pmf/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace pmf {

void OptimConfig::validate() const {
    if (lr <= 0) throw ConfigError("optimizer.lr must be positive");
    if (warmup_steps < 0) throw ConfigError("optimizer.warmup_steps must be >= 0");
    if (total_steps < 0) throw ConfigError("optimizer.total_steps must be >= 0");
    if (batch < 1) throw ConfigError("optimizer.batch must be >= 1");
    if (weight_decay < 0) throw ConfigError("optimizer.weight_decay must be >= 0");
    if (checkpoint_every < 1) throw ConfigError("optimizer.checkpoint_every must be >= 1");
    if (log_every < 1) throw ConfigError("optimizer.log_every must be >= 1");
}

void DataConfig::validate() const {
    if (families.empty()) throw ConfigError("data.families must not be empty");
    if (n_points < 8) throw ConfigError("data.n_points must be >= 8");
    if (n_train < 1 || n_test < 1) throw ConfigError("data.n_train/n_test must be >= 1");
}

void RunConfig::validate() const {
    try {
        model.validate();
        guidance.validate();
        dsa.validate();
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    optimizer.validate();
    data.validate();
    if (model.points != data.n_points)
        throw ConfigError("model.points must equal data.n_points");
    if (model.cond_dim != kDescriptorDim)
        throw ConfigError("model.cond_dim is fixed by the condition descriptor (13)");
}

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string families_to_string(const std::vector<Family>& fams) {
    std::string out;
    for (size_t i = 0; i < fams.size(); ++i) {
        if (i) out += ",";
        out += family_to_string(fams[i]);
    }
    return out;
}

std::vector<Family> families_from_string(const std::string& s) {
    std::vector<Family> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) out.push_back(family_from_string(tok));
    }
    return out;
}

double parse_double(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("bad numeric value '" + v + "' for key " + key);
    }
}

int parse_int(const std::string& v, const std::string& key) {
    double d = parse_double(v, key);
    auto i = int64_t(d);
    if (double(i) != d) throw ConfigError("expected an integer for key " + key + ", got '" + v + "'");
    return int(i);
}

uint64_t parse_u64(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        uint64_t u = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return u;
    } catch (const std::exception&) {
        throw ConfigError("bad unsigned value '" + v + "' for key " + key);
    }
}

}  // namespace

std::string RunConfig::serialize() const {
    std::ostringstream os;
    os << "[model]\n";
    os << "hidden = " << model.hidden << "\n";
    os << "blocks = " << model.blocks << "\n";
    os << "heads = " << model.heads << "\n";
    os << "ctx_tokens = " << model.ctx_tokens << "\n";
    os << "pma_dim = " << model.pma_dim << "\n";
    os << "pma_heads = " << model.pma_heads << "\n";
    os << "ffn_mult = " << fmt_double(model.ffn_mult) << "\n";
    os << "\n[guidance]\n";
    os << "omega = " << fmt_double(guidance.omega) << "\n";
    os << "kappa = " << fmt_double(guidance.kappa) << "\n";
    os << "label_dropout = " << fmt_double(guidance.label_dropout) << "\n";
    os << "weight_p = " << fmt_double(guidance.weight_p) << "\n";
    os << "weight_c = " << fmt_double(guidance.weight_c) << "\n";
    os << "\n[dsa]\n";
    os << "lambda_base = " << fmt_double(dsa.lambda_base) << "\n";
    os << "tau = " << fmt_double(dsa.tau) << "\n";
    os << "delta = " << fmt_double(dsa.delta) << "\n";
    os << "set_distance = " << set_distance_to_string(dsa.set_distance) << "\n";
    os << "sinkhorn_iters = " << dsa.sinkhorn_iters << "\n";
    os << "target_peak = " << fmt_double(dsa.target_peak) << "\n";
    os << "\n[optimizer]\n";
    os << "lr = " << fmt_double(optimizer.lr) << "\n";
    os << "warmup_steps = " << optimizer.warmup_steps << "\n";
    os << "total_steps = " << optimizer.total_steps << "\n";
    os << "batch = " << optimizer.batch << "\n";
    os << "weight_decay = " << fmt_double(optimizer.weight_decay) << "\n";
    os << "clip_norm = " << fmt_double(optimizer.clip_norm) << "\n";
    os << "checkpoint_every = " << optimizer.checkpoint_every << "\n";
    os << "log_every = " << optimizer.log_every << "\n";
    os << "\n[data]\n";
    os << "families = " << families_to_string(data.families) << "\n";
    os << "n_points = " << data.n_points << "\n";
    os << "n_train = " << data.n_train << "\n";
    os << "n_test = " << data.n_test << "\n";
    os << "split_seed = " << data.split_seed << "\n";
    os << "\n[run]\n";
    os << "seed = " << run_seed << "\n";
    return os.str();
}

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        // trim
        auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        auto e = line.find_last_not_of(" \t\r");
        line = line.substr(b, e - b + 1);
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("malformed section at line " + std::to_string(lineno));
            section = line.substr(1, line.size() - 2);
            if (section != "model" && section != "guidance" && section != "dsa" &&
                section != "optimizer" && section != "data" && section != "run")
                throw ConfigError("unknown section [" + section + "] at line " + std::to_string(lineno));
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("expected key = value at line " + std::to_string(lineno));
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        auto trim = [](std::string& s) {
            auto b2 = s.find_first_not_of(" \t");
            auto e2 = s.find_last_not_of(" \t");
            s = (b2 == std::string::npos) ? "" : s.substr(b2, e2 - b2 + 1);
        };
        trim(key);
        trim(val);
        if (section.empty()) throw ConfigError("key '" + key + "' outside any section");
        std::string qual = section + "." + key;

        if (section == "model") {
            if (key == "hidden") cfg.model.hidden = parse_int(val, qual);
            else if (key == "blocks") cfg.model.blocks = parse_int(val, qual);
            else if (key == "heads") cfg.model.heads = parse_int(val, qual);
            else if (key == "ctx_tokens") cfg.model.ctx_tokens = parse_int(val, qual);
            else if (key == "pma_dim") cfg.model.pma_dim = parse_int(val, qual);
            else if (key == "pma_heads") cfg.model.pma_heads = parse_int(val, qual);
            else if (key == "ffn_mult") cfg.model.ffn_mult = parse_double(val, qual);
            else throw ConfigError("unknown key '" + qual + "'");
        } else if (section == "guidance") {
            if (key == "omega") cfg.guidance.omega = parse_double(val, qual);
            else if (key == "kappa") cfg.guidance.kappa = parse_double(val, qual);
            else if (key == "label_dropout") cfg.guidance.label_dropout = parse_double(val, qual);
            else if (key == "weight_p") cfg.guidance.weight_p = parse_double(val, qual);
            else if (key == "weight_c") cfg.guidance.weight_c = parse_double(val, qual);
            else throw ConfigError("unknown key '" + qual + "'");
        } else if (section == "dsa") {
            if (key == "lambda_base") cfg.dsa.lambda_base = parse_double(val, qual);
            else if (key == "tau") cfg.dsa.tau = parse_double(val, qual);
            else if (key == "delta") cfg.dsa.delta = parse_double(val, qual);
            else if (key == "set_distance") cfg.dsa.set_distance = set_distance_from_string(val);
            else if (key == "sinkhorn_iters") cfg.dsa.sinkhorn_iters = parse_int(val, qual);
            else if (key == "target_peak") cfg.dsa.target_peak = parse_double(val, qual);
            else throw ConfigError("unknown key '" + qual + "'");
        } else if (section == "optimizer") {
            if (key == "lr") cfg.optimizer.lr = parse_double(val, qual);
            else if (key == "warmup_steps") cfg.optimizer.warmup_steps = parse_int(val, qual);
            else if (key == "total_steps") cfg.optimizer.total_steps = parse_int(val, qual);
            else if (key == "batch") cfg.optimizer.batch = parse_int(val, qual);
            else if (key == "weight_decay") cfg.optimizer.weight_decay = parse_double(val, qual);
            else if (key == "clip_norm") cfg.optimizer.clip_norm = parse_double(val, qual);
            else if (key == "checkpoint_every") cfg.optimizer.checkpoint_every = parse_int(val, qual);
            else if (key == "log_every") cfg.optimizer.log_every = parse_int(val, qual);
            else throw ConfigError("unknown key '" + qual + "'");
        } else if (section == "data") {
            if (key == "families") cfg.data.families = families_from_string(val);
            else if (key == "n_points") cfg.data.n_points = parse_int(val, qual);
            else if (key == "n_train") cfg.data.n_train = parse_int(val, qual);
            else if (key == "n_test") cfg.data.n_test = parse_int(val, qual);
            else if (key == "split_seed") cfg.data.split_seed = parse_u64(val, qual);
            else throw ConfigError("unknown key '" + qual + "'");
        } else if (section == "run") {
            if (key == "seed") cfg.run_seed = parse_u64(val, qual);
            else throw ConfigError("unknown key '" + qual + "'");
        }
    }
    cfg.model.points = cfg.data.n_points;
    cfg.model.cond_dim = kDescriptorDim;
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

}  // namespace pmf
