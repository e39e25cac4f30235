#include "core/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace apt {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t out{};
  auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || p != value.data() + value.size())
    raise(ErrorCode::Config, key + ": '" + value + "' is not a non-negative integer");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::uint64_t out{};
  auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || p != value.data() + value.size())
    raise(ErrorCode::Config, key + ": '" + value + "' is not a non-negative integer");
  return out;
}

long parse_long(const std::string& key, const std::string& value) {
  long out{};
  auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || p != value.data() + value.size())
    raise(ErrorCode::Config, key + ": '" + value + "' is not an integer");
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    double out = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return out;
  } catch (const std::exception&) {
    raise(ErrorCode::Config, key + ": '" + value + "' is not a number");
  }
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;
  static const std::map<std::string, Setter> kSetters = {
      {"image_size",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.image_size = parse_size(k, v);
         c.data.image_size = c.model.image_size;
       }},
      {"channels",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.channels = parse_size(k, v);
         c.data.channels = c.model.channels;
       }},
      {"patch_size", [](RunConfig& c, const std::string& k,
                        const std::string& v) { c.model.patch_size = parse_size(k, v); }},
      {"depth", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.depth = parse_size(k, v);
       }},
      {"dim", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.dim = parse_size(k, v);
       }},
      {"heads", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.heads = parse_size(k, v);
       }},
      {"mlp_ratio", [](RunConfig& c, const std::string& k,
                       const std::string& v) { c.model.mlp_ratio = parse_size(k, v); }},
      {"pretrain_classes", [](RunConfig& c, const std::string& k,
                              const std::string& v) { c.data.pretrain_classes = parse_size(k, v); }},
      {"cil_classes", [](RunConfig& c, const std::string& k,
                         const std::string& v) { c.data.cil_classes = parse_size(k, v); }},
      {"train_per_class", [](RunConfig& c, const std::string& k,
                             const std::string& v) { c.data.train_per_class = parse_size(k, v); }},
      {"test_per_class", [](RunConfig& c, const std::string& k,
                            const std::string& v) { c.data.test_per_class = parse_size(k, v); }},
      {"noise_sigma", [](RunConfig& c, const std::string& k,
                         const std::string& v) { c.data.noise_sigma = parse_double(k, v); }},
      {"max_shift", [](RunConfig& c, const std::string& k,
                       const std::string& v) { c.data.max_shift = parse_long(k, v); }},
      {"data_seed", [](RunConfig& c, const std::string& k,
                       const std::string& v) { c.data.seed = parse_u64(k, v); }},
      {"tasks", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.tasks = parse_size(k, v);
       }},
      {"method", [](RunConfig& c, const std::string&, const std::string& v) {
         parse_method(v);  // reject unknown names early
         c.method = v;
       }},
      {"alpha", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.alpha = parse_double(k, v);
       }},
      {"ppf_warm_start", [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v != "fused" && v != "raw" && v != "fresh")
           raise(ErrorCode::Config, k + ": '" + v + "' (expected fused, raw or fresh)");
         c.ppf_warm_start = v;
       }},
      {"seed", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.seed = parse_u64(k, v);
       }},
      {"epochs", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.epochs = parse_size(k, v);
       }},
      {"batch_size", [](RunConfig& c, const std::string& k,
                        const std::string& v) { c.batch_size = parse_size(k, v); }},
      {"lr_prompts", [](RunConfig& c, const std::string& k,
                        const std::string& v) { c.lr_prompts = parse_double(k, v); }},
      {"lr_head", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.lr_head = parse_double(k, v);
       }},
      {"adam_beta1", [](RunConfig& c, const std::string& k,
                        const std::string& v) { c.adam_beta1 = parse_double(k, v); }},
      {"adam_beta2", [](RunConfig& c, const std::string& k,
                        const std::string& v) { c.adam_beta2 = parse_double(k, v); }},
      {"adam_eps", [](RunConfig& c, const std::string& k,
                      const std::string& v) { c.adam_eps = parse_double(k, v); }},
      {"pretrain_epochs", [](RunConfig& c, const std::string& k,
                             const std::string& v) { c.pretrain_epochs = parse_size(k, v); }},
      {"pretrain_lr", [](RunConfig& c, const std::string& k,
                         const std::string& v) { c.pretrain_lr = parse_double(k, v); }},
      {"pretrain_seed", [](RunConfig& c, const std::string& k,
                           const std::string& v) { c.pretrain_seed = parse_u64(k, v); }},
      {"vpt_n", [](RunConfig& c, const std::string& k, const std::string& v) {
         c.vpt_n = parse_size(k, v);
       }},
      {"pool_size", [](RunConfig& c, const std::string& k,
                       const std::string& v) { c.pool_size = parse_size(k, v); }},
      {"pool_top_k", [](RunConfig& c, const std::string& k,
                        const std::string& v) { c.pool_top_k = parse_size(k, v); }},
      {"pool_block_len", [](RunConfig& c, const std::string& k,
                            const std::string& v) { c.pool_block_len = parse_size(k, v); }},
  };
  auto it = kSetters.find(key);
  if (it == kSetters.end()) raise(ErrorCode::Config, "unknown configuration key '" + key + "'");
  it->second(*this, key, trim(value));
}

void RunConfig::set_kv(const std::string& key_equals_value) {
  std::size_t eq = key_equals_value.find('=');
  if (eq == std::string::npos)
    raise(ErrorCode::Config, "expected key=value, got '" + key_equals_value + "'");
  set(trim(key_equals_value.substr(0, eq)), trim(key_equals_value.substr(eq + 1)));
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) raise(ErrorCode::Io, path + ": cannot open");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      raise(ErrorCode::Config,
            path + ":" + std::to_string(lineno) + ": expected key = value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void RunConfig::validate() const {
  model.validate();
  data.validate();
  if (model.image_size != data.image_size || model.channels != data.channels)
    raise(ErrorCode::Config, "model and data disagree on image geometry");
  parse_method(method);
  if (alpha < 0.0 || alpha > 1.0) raise(ErrorCode::Config, "alpha must lie in [0, 1]");
  if (tasks == 0) raise(ErrorCode::Config, "tasks must be positive");
  if (data.cil_classes < tasks)
    raise(ErrorCode::Config, "need at least one class per task: " +
                                 std::to_string(data.cil_classes) + " classes, " +
                                 std::to_string(tasks) + " tasks");
  if (epochs == 0 || pretrain_epochs == 0) raise(ErrorCode::Config, "epochs must be positive");
  if (batch_size == 0) raise(ErrorCode::Config, "batch_size must be positive");
  if (lr_prompts <= 0.0 || lr_head <= 0.0 || pretrain_lr <= 0.0)
    raise(ErrorCode::Config, "learning rates must be positive");
  if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0)
    raise(ErrorCode::Config, "adam betas must lie in [0, 1)");
  if (adam_eps <= 0.0) raise(ErrorCode::Config, "adam_eps must be positive");
  if (vpt_n == 0) raise(ErrorCode::Config, "vpt_n must be positive");
  if (pool_size == 0 || pool_block_len == 0 || pool_top_k == 0 || pool_top_k > pool_size)
    raise(ErrorCode::Config, "pool geometry: need 0 < pool_top_k <= pool_size, pool_block_len > 0");
}

MethodShape RunConfig::method_shape() const {
  MethodShape s;
  s.method = parse_method(method);
  s.vpt_n = vpt_n;
  s.pool_size = pool_size;
  s.pool_block_len = pool_block_len;
  s.pool_top_k = pool_top_k;
  return s;
}

std::map<std::string, std::string> RunConfig::to_map() const {
  auto num = [](double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  };
  return {
      {"image_size", std::to_string(model.image_size)},
      {"channels", std::to_string(model.channels)},
      {"patch_size", std::to_string(model.patch_size)},
      {"depth", std::to_string(model.depth)},
      {"dim", std::to_string(model.dim)},
      {"heads", std::to_string(model.heads)},
      {"mlp_ratio", std::to_string(model.mlp_ratio)},
      {"pretrain_classes", std::to_string(data.pretrain_classes)},
      {"cil_classes", std::to_string(data.cil_classes)},
      {"train_per_class", std::to_string(data.train_per_class)},
      {"test_per_class", std::to_string(data.test_per_class)},
      {"noise_sigma", num(data.noise_sigma)},
      {"max_shift", std::to_string(data.max_shift)},
      {"data_seed", std::to_string(data.seed)},
      {"tasks", std::to_string(tasks)},
      {"method", method},
      {"alpha", num(alpha)},
      {"ppf_warm_start", ppf_warm_start},
      {"seed", std::to_string(seed)},
      {"epochs", std::to_string(epochs)},
      {"batch_size", std::to_string(batch_size)},
      {"lr_prompts", num(lr_prompts)},
      {"lr_head", num(lr_head)},
      {"adam_beta1", num(adam_beta1)},
      {"adam_beta2", num(adam_beta2)},
      {"adam_eps", num(adam_eps)},
      {"pretrain_epochs", std::to_string(pretrain_epochs)},
      {"pretrain_lr", num(pretrain_lr)},
      {"pretrain_seed", std::to_string(pretrain_seed)},
      {"vpt_n", std::to_string(vpt_n)},
      {"pool_size", std::to_string(pool_size)},
      {"pool_top_k", std::to_string(pool_top_k)},
      {"pool_block_len", std::to_string(pool_block_len)},
  };
}

}  // namespace apt
