#include "iresnet/io.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace iresnet {
namespace {

namespace pt = boost::property_tree;

const std::set<std::string> kModelKeys = {"n_blocks", "hidden", "coeff", "activation",
                                          "actnorm_placement", "power_iters"};
const std::set<std::string> kTrainKeys = {"dataset", "steps", "batch_size", "lr", "beta1",
                                          "beta2", "adam_eps", "logdet_mode", "n_terms",
                                          "probes", "seed", "log_every"};

template <typename T>
T get_field(const pt::ptree& tree, const std::string& section, const std::string& key, T fallback,
            const std::string& accepted) {
  const auto value = tree.get_optional<std::string>(key);
  if (!value) return fallback;
  std::istringstream is(*value);
  is.imbue(std::locale::classic());
  T out{};
  is >> out;
  if (!is || !(is >> std::ws).eof())
    throw ConfigError("config field '" + section + "." + key + "' = '" + *value + "' invalid (accepted: " + accepted + ")");
  return out;
}

std::vector<Index> parse_widths(const std::string& text) {
  std::vector<Index> widths;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long w = std::stol(item, &used);
      if (item.find_first_not_of(" \t", used) != std::string::npos || w < 1) throw std::invalid_argument(item);
      widths.push_back(w);
    } catch (const std::exception&) {
      throw ConfigError("config field 'model.hidden' = '" + text +
                        "' invalid (accepted: comma-separated positive widths)");
    }
  }
  return widths;
}

LogDetMode logdet_mode_from_string(const std::string& name) {
  if (name == "exact") return LogDetMode::exact;
  if (name == "stochastic") return LogDetMode::series_stochastic;
  throw ConfigError("config field 'train.logdet_mode' = '" + name + "' invalid (accepted: exact, stochastic)");
}

std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

TrainConfig parse_config(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::ini_parser::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    const std::set<std::string>* keys = nullptr;
    if (section == "model") keys = &kModelKeys;
    else if (section == "train") keys = &kTrainKeys;
    else throw ConfigError("config section '" + section + "' not recognized (accepted: model, train)");
    for (const auto& [key, unused] : body) {
      (void)unused;
      if (!keys->count(key)) throw ConfigError("config field '" + section + "." + key + "' not recognized");
    }
  }

  TrainConfig c;
  const pt::ptree empty;
  const pt::ptree& model = tree.get_child("model", empty);
  const pt::ptree& train = tree.get_child("train", empty);
  c.n_blocks = get_field(model, "model", "n_blocks", c.n_blocks, "integer >= 1");
  if (auto h = model.get_optional<std::string>("hidden")) c.hidden = parse_widths(*h);
  c.coeff = get_field(model, "model", "coeff", c.coeff, "real in (0, 1)");
  if (auto a = model.get_optional<std::string>("activation")) {
    c.activation = graph::activation_from_string(*a);
    if (c.activation == graph::Activation::exp)
      throw ConfigError("config field 'model.activation' = 'exp' invalid (accepted: elu, softplus, tanh)");
  }
  if (auto p = model.get_optional<std::string>("actnorm_placement")) c.placement = placement_from_string(*p);
  c.power_iters = get_field(model, "model", "power_iters", c.power_iters, "integer >= 1");

  if (auto d = train.get_optional<std::string>("dataset")) c.dataset = *d;
  c.steps = get_field(train, "train", "steps", c.steps, "integer >= 0");
  c.batch_size = get_field(train, "train", "batch_size", c.batch_size, "integer >= 1");
  c.lr = get_field(train, "train", "lr", c.lr, "positive real");
  c.beta1 = get_field(train, "train", "beta1", c.beta1, "real in [0, 1)");
  c.beta2 = get_field(train, "train", "beta2", c.beta2, "real in [0, 1)");
  c.adam_eps = get_field(train, "train", "adam_eps", c.adam_eps, "positive real");
  if (auto m = train.get_optional<std::string>("logdet_mode")) c.logdet_mode = logdet_mode_from_string(*m);
  c.n_terms = get_field(train, "train", "n_terms", c.n_terms, "integer >= 1");
  if (auto p = train.get_optional<std::string>("probes")) c.probes = probe_distribution_from_string(*p);
  c.seed = get_field<std::uint64_t>(train, "train", "seed", c.seed, "unsigned 64-bit integer");
  c.log_every = get_field(train, "train", "log_every", c.log_every, "integer >= 1");
  c.validate();
  return c;
}

TrainConfig load_config(const std::string& path) { return parse_config(read_file(path)); }

bool config_sets(const std::string& text, const std::string& key) {
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::ini_parser::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return static_cast<bool>(tree.get_optional<std::string>(key));
}

std::string config_to_string(const TrainConfig& c) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  std::string hidden;
  for (std::size_t i = 0; i < c.hidden.size(); ++i) hidden += (i ? "," : "") + std::to_string(c.hidden[i]);
  os << "[model]\n"
     << "n_blocks = " << c.n_blocks << "\n"
     << "hidden = " << hidden << "\n"
     << "coeff = " << fmt_double(c.coeff) << "\n"
     << "activation = " << graph::to_string(c.activation) << "\n"
     << "actnorm_placement = " << to_string(c.placement) << "\n"
     << "power_iters = " << c.power_iters << "\n"
     << "\n[train]\n"
     << "dataset = " << c.dataset << "\n"
     << "steps = " << c.steps << "\n"
     << "batch_size = " << c.batch_size << "\n"
     << "lr = " << fmt_double(c.lr) << "\n"
     << "beta1 = " << fmt_double(c.beta1) << "\n"
     << "beta2 = " << fmt_double(c.beta2) << "\n"
     << "adam_eps = " << fmt_double(c.adam_eps) << "\n"
     << "logdet_mode = " << (c.logdet_mode == LogDetMode::exact ? "exact" : "stochastic") << "\n"
     << "n_terms = " << c.n_terms << "\n"
     << "probes = " << to_string(c.probes) << "\n"
     << "seed = " << c.seed << "\n"
     << "log_every = " << c.log_every << "\n";
  return os.str();
}

std::string config_hash(const TrainConfig& config) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : config_to_string(config)) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << contents;
  if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace iresnet
