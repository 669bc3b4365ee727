#include "iresnet/io.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>

namespace iresnet {
namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'I', 'R', 'E', 'S', 'N', 'E', 'T', 'C'};
constexpr std::size_t kMetricsTail = 100;

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw IoError("checkpoint truncated");
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    value |= static_cast<T>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(T);
  return value;
}

class PayloadWriter {
 public:
  template <typename Derived>
  void put(const Eigen::DenseBase<Derived>& m) {
    // Row-major element order regardless of storage order.
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) put_le(bytes_, std::bit_cast<std::uint64_t>(static_cast<double>(m(i, j))));
    count_ += static_cast<std::size_t>(m.size());
  }
  const std::string& bytes() const { return bytes_; }
  std::size_t count() const { return count_; }

 private:
  std::string bytes_;
  std::size_t count_ = 0;
};

class PayloadReader {
 public:
  PayloadReader(const std::string& data, std::size_t pos) : data_(data), pos_(pos) {}
  template <typename Derived>
  void get(Eigen::DenseBase<Derived>& m) {
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) m(i, j) = std::bit_cast<double>(get_le<std::uint64_t>(data_, pos_));
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::size_t pos_;
};

}  // namespace

void save_checkpoint(const std::string& path, const TrainConfig& config, const TrainState& state) {
  const IResNetModel& model = state.model;
  json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = config_to_string(config);
  header["dim"] = model.dim;
  header["coeff"] = model.coeff;
  header["placement"] = to_string(model.placement);
  header["step"] = state.step;
  header["running_nll"] = state.running_nll;
  header["initial_nll"] = state.initial_nll;
  header["adam_step"] = state.adam.step;
  header["rng"] = {{"data", state.data_rng.state()}, {"probes", state.probe_rng.state()}};

  PayloadWriter payload;
  json stages = json::array();
  for (const auto& stage : model.stages) {
    json layers = json::array();
    payload.put(stage.actnorm.log_scale.transpose());
    payload.put(stage.actnorm.shift.transpose());
    for (const auto& layer : stage.block.layers()) {
      layers.push_back({{"in", layer.in_dim()},
                        {"out", layer.out_dim()},
                        {"coeff", layer.coeff},
                        {"sigma_estimate", layer.sigma_estimate}});
      payload.put(layer.weight);
      payload.put(layer.bias);
      payload.put(layer.u.transpose());
      payload.put(layer.v.transpose());
    }
    stages.push_back({{"actnorm_initialized", stage.actnorm.initialized},
                      {"activation", graph::to_string(stage.block.activation())},
                      {"layers", layers}});
  }
  header["stages"] = stages;

  json moments = json::array();
  for (std::size_t i = 0; i < state.adam.m.size(); ++i) {
    moments.push_back({state.adam.m[i].rows(), state.adam.m[i].cols()});
    payload.put(state.adam.m[i]);
    payload.put(state.adam.v[i]);
  }
  header["adam_shapes"] = moments;

  json metrics = json::array();
  const std::size_t first = state.metrics.size() > kMetricsTail ? state.metrics.size() - kMetricsTail : 0;
  for (std::size_t i = first; i < state.metrics.size(); ++i) {
    const auto& r = state.metrics[i];
    metrics.push_back({r.step, r.nll_bits, r.grad_norm, r.max_layer_sigma});
  }
  header["metrics_tail"] = metrics;
  header["payload_doubles"] = payload.count();

  const std::string text = header.dump();
  std::string out(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  out += payload.bytes();
  write_file(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string data = read_file(path);
  if (data.size() < sizeof kMagic || std::memcmp(data.data(), kMagic, sizeof kMagic) != 0)
    throw IoError("'" + path + "' is not a checkpoint (bad magic)");
  std::size_t pos = sizeof kMagic;
  const auto version = get_le<std::uint32_t>(data, pos);
  if (version != kCheckpointVersion)
    throw IoError("checkpoint format version " + std::to_string(version) + " unsupported (expected " +
                  std::to_string(kCheckpointVersion) + ")");
  const auto header_len = get_le<std::uint64_t>(data, pos);
  if (pos + header_len > data.size()) throw IoError("checkpoint truncated");
  json header;
  try {
    header = json::parse(data.substr(pos, header_len));
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint header malformed: ") + e.what());
  }
  pos += header_len;

  Checkpoint ck;
  try {
    if (header.at("format_version").get<std::uint32_t>() != kCheckpointVersion)
      throw IoError("checkpoint header version mismatch");
    ck.config = parse_config(header.at("config").get<std::string>());
    TrainState& st = ck.state;
    IResNetModel& model = st.model;
    model.dim = header.at("dim").get<Index>();
    model.coeff = header.at("coeff").get<double>();
    model.placement = placement_from_string(header.at("placement").get<std::string>());
    st.step = header.at("step").get<long>();
    st.running_nll = header.at("running_nll").get<double>();
    st.initial_nll = header.at("initial_nll").get<double>();
    st.adam.step = header.at("adam_step").get<long>();
    st.data_rng.restore(header.at("rng").at("data").get<std::string>());
    st.probe_rng.restore(header.at("rng").at("probes").get<std::string>());

    PayloadReader payload(data, pos);
    for (const auto& js : header.at("stages")) {
      Stage stage{ActNormLayer::identity(model.dim), {}};
      stage.actnorm.initialized = js.at("actnorm_initialized").get<bool>();
      RowVector buf(model.dim);
      payload.get(buf);
      stage.actnorm.log_scale = buf.transpose();
      payload.get(buf);
      stage.actnorm.shift = buf.transpose();
      std::vector<SpectralDenseLayer> layers;
      for (const auto& jl : js.at("layers")) {
        SpectralDenseLayer layer;
        const Index in = jl.at("in").get<Index>(), out = jl.at("out").get<Index>();
        layer.coeff = jl.at("coeff").get<double>();
        layer.sigma_estimate = jl.at("sigma_estimate").get<double>();
        layer.weight.resize(out, in);
        layer.bias.resize(out);
        RowVector u(out), v(in);
        payload.get(layer.weight);
        payload.get(layer.bias);
        payload.get(u);
        payload.get(v);
        layer.u = u.transpose();
        layer.v = v.transpose();
        layers.push_back(std::move(layer));
      }
      stage.block = ResidualBlock(std::move(layers),
                                  graph::activation_from_string(js.at("activation").get<std::string>()));
      model.stages.push_back(std::move(stage));
    }
    for (const auto& shape : header.at("adam_shapes")) {
      Matrix m(shape.at(0).get<Index>(), shape.at(1).get<Index>());
      Matrix v(m.rows(), m.cols());
      payload.get(m);
      payload.get(v);
      st.adam.m.push_back(std::move(m));
      st.adam.v.push_back(std::move(v));
    }
    if (!payload.at_end()) throw IoError("checkpoint payload has trailing bytes");
    for (const auto& r : header.at("metrics_tail"))
      st.metrics.push_back(MetricRow{r.at(0).get<long>(), r.at(1).get<double>(), r.at(2).get<double>(),
                                     r.at(3).get<double>()});
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint header incomplete: ") + e.what());
  }
  return ck;
}

}  // namespace iresnet
