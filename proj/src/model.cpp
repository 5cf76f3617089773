#include "cfdr/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "cfdr/rng.hpp"
#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace cfdr {

using nlohmann::json;

std::string ModelConfig::to_json() const {
  json j;
  j["preset"] = preset;
  j["embedding_dim"] = embedding_dim;
  j["proj_hidden_dim"] = proj_hidden_dim;
  j["proj_dim"] = proj_dim;
  j["num_classes"] = num_classes;
  j["seed"] = seed;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& js) {
  json j = json::parse(js);
  ModelConfig cfg;
  cfg.preset = j.value("preset", cfg.preset);
  cfg.embedding_dim = j.value("embedding_dim", cfg.embedding_dim);
  cfg.proj_hidden_dim = j.value("proj_hidden_dim", cfg.proj_hidden_dim);
  cfg.proj_dim = j.value("proj_dim", cfg.proj_dim);
  cfg.num_classes = j.value("num_classes", cfg.num_classes);
  cfg.seed = j.value("seed", cfg.seed);
  return cfg;
}

uint64_t ModelConfig::hash() const { return fnv1a64(to_json()); }

namespace {

Tensor he_uniform(const Shape& shape, int64_t fan_in, Rng& rng) {
  float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
  std::vector<float> data(shape_numel(shape));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return Tensor::from_data(shape, std::move(data), /*requires_grad=*/true);
}

Conv2dLayer make_conv(const std::string& name, int in_c, int out_c, int k, int pad, Rng& rng) {
  Conv2dLayer layer;
  layer.pad = pad;
  layer.weight = Parameter(name + ".weight",
                           he_uniform({out_c, in_c, k, k}, static_cast<int64_t>(in_c) * k * k, rng));
  layer.bias = Parameter(name + ".bias", Tensor::zeros({out_c}, /*requires_grad=*/true));
  return layer;
}

LinearLayer make_linear(const std::string& name, int in_d, int out_d, Rng& rng) {
  LinearLayer layer;
  layer.weight = Parameter(name + ".weight", he_uniform({out_d, in_d}, in_d, rng));
  layer.bias = Parameter(name + ".bias", Tensor::zeros({out_d}, /*requires_grad=*/true));
  return layer;
}

Tensor linear_forward(const LinearLayer& l, const Tensor& x) {
  return add(matmul(x, l.weight.tensor, /*transpose_b=*/true), l.bias.tensor);
}

void check_finite(const Tensor& images) {
  for (float v : images.data())
    if (!std::isfinite(v)) throw std::invalid_argument("encode: non-finite value in input images");
}

}  // namespace

Model build_model(const ModelConfig& cfg) {
  if (cfg.embedding_dim <= 0 || cfg.proj_hidden_dim <= 0 || cfg.proj_dim <= 0 ||
      cfg.num_classes <= 0)
    throw std::invalid_argument("build_model: invalid dims (all must be positive)");
  if (cfg.preset != "tiny" && cfg.preset != "resnet-lite")
    throw std::invalid_argument("build_model: unknown preset '" + cfg.preset + "'");

  Model m;
  m.config = cfg;
  Rng rng = substream(cfg.seed, "init");

  if (cfg.preset == "tiny") {
    m.encoder_convs.push_back(make_conv("encoder.conv1", 3, 16, 3, 1, rng));
    m.encoder_convs.push_back(make_conv("encoder.conv2", 16, 32, 3, 1, rng));
    m.encoder_convs.push_back(make_conv("encoder.conv3", 32, cfg.embedding_dim, 3, 1, rng));
  } else {
    // downsampling stem, then two residual blocks at 8x8 and a widening head
    m.encoder_convs.push_back(make_conv("encoder.conv1", 3, 16, 3, 1, rng));
    m.encoder_convs.push_back(make_conv("encoder.conv2", 16, 32, 3, 1, rng));
    m.encoder_convs.push_back(make_conv("encoder.block1.conv1", 32, 32, 3, 1, rng));
    m.encoder_convs.push_back(make_conv("encoder.block1.conv2", 32, 32, 3, 1, rng));
    m.encoder_convs.push_back(make_conv("encoder.block2.conv1", 32, 32, 3, 1, rng));
    m.encoder_convs.push_back(make_conv("encoder.block2.conv2", 32, 32, 3, 1, rng));
    m.encoder_convs.push_back(make_conv("encoder.conv3", 32, cfg.embedding_dim, 3, 1, rng));
  }

  m.proj_fc1 = make_linear("projection.fc1", cfg.embedding_dim, cfg.proj_hidden_dim, rng);
  m.proj_fc2 = make_linear("projection.fc2", cfg.proj_hidden_dim, cfg.proj_dim, rng);
  m.classifier = make_linear("classifier.fc", cfg.embedding_dim, cfg.num_classes, rng);
  return m;
}

Tensor Model::encode(const Tensor& images) const {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 3)
    throw std::invalid_argument("encode expects [B,3,H,W] images, got " + shape_str(s));
  check_finite(images);

  if (config.preset == "tiny") {
    Tensor x = images;
    for (size_t i = 0; i < encoder_convs.size(); ++i) {
      const auto& c = encoder_convs[i];
      x = relu(conv2d(x, c.weight.tensor, c.bias.tensor, c.stride, c.pad));
      if (i + 1 < encoder_convs.size()) x = max_pool2d(x, 2, 2);
    }
    return global_avg_pool(x);
  }

  // resnet-lite
  auto conv_relu = [](const Conv2dLayer& c, const Tensor& in) {
    return relu(conv2d(in, c.weight.tensor, c.bias.tensor, 1, c.pad));
  };
  auto res_block = [&](const Conv2dLayer& c1, const Conv2dLayer& c2, const Tensor& in) {
    Tensor y = conv_relu(c1, in);
    y = conv2d(y, c2.weight.tensor, c2.bias.tensor, 1, c2.pad);
    return relu(add(y, in));
  };
  Tensor x = max_pool2d(conv_relu(encoder_convs[0], images), 2, 2);
  x = max_pool2d(conv_relu(encoder_convs[1], x), 2, 2);
  x = res_block(encoder_convs[2], encoder_convs[3], x);
  x = res_block(encoder_convs[4], encoder_convs[5], x);
  x = conv_relu(encoder_convs[6], x);
  return global_avg_pool(x);
}

Tensor Model::project(const Tensor& h) const {
  if (h.shape().size() != 2 || h.shape()[1] != config.embedding_dim)
    throw std::invalid_argument("project expects [B," + std::to_string(config.embedding_dim) +
                                "], got " + shape_str(h.shape()));
  return linear_forward(proj_fc2, relu(linear_forward(proj_fc1, h)));
}

Tensor Model::classify(const Tensor& h) const {
  if (h.shape().size() != 2 || h.shape()[1] != config.embedding_dim)
    throw std::invalid_argument("classify expects [B," + std::to_string(config.embedding_dim) +
                                "], got " + shape_str(h.shape()));
  return linear_forward(classifier, h);
}

std::vector<Parameter*> Model::encoder_parameters() {
  std::vector<Parameter*> out;
  for (auto& c : encoder_convs) {
    out.push_back(&c.weight);
    out.push_back(&c.bias);
  }
  return out;
}

std::vector<Parameter*> Model::projection_parameters() {
  return {&proj_fc1.weight, &proj_fc1.bias, &proj_fc2.weight, &proj_fc2.bias};
}

std::vector<Parameter*> Model::classifier_parameters() {
  return {&classifier.weight, &classifier.bias};
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out = encoder_parameters();
  for (auto* p : projection_parameters()) out.push_back(p);
  for (auto* p : classifier_parameters()) out.push_back(p);
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  std::vector<const Parameter*> out;
  for (auto* p : const_cast<Model*>(this)->parameters()) out.push_back(p);
  return out;
}

Parameter* Model::find_parameter(const std::string& name) {
  for (auto* p : parameters())
    if (p->name == name) return p;
  return nullptr;
}

const Parameter* Model::find_parameter(const std::string& name) const {
  return const_cast<Model*>(this)->find_parameter(name);
}

std::vector<std::string> Model::weight_layer_names() const {
  std::vector<std::string> out;
  for (auto* p : parameters())
    if (p->name.ends_with(".weight")) out.push_back(p->name);
  return out;
}

QuantizedLayerView& Model::quantize_layer(const std::string& layer_name) {
  Parameter* p = find_parameter(layer_name);
  if (!p) throw std::invalid_argument("quantize_layer: unknown layer '" + layer_name + "'");

  QuantizedLayerView view;
  view.layer_name = layer_name;
  view.param = p;
  auto& w = p->tensor.data();
  float max_abs = 0.0f;
  for (float v : w) max_abs = std::max(max_abs, std::fabs(v));
  view.scale = max_abs > 0.0f ? max_abs / 127.0f : 1.0f;
  view.qweights.resize(w.size());
  view.shadow.resize(w.size());
  for (size_t i = 0; i < w.size(); ++i) {
    long q = std::lround(w[i] / view.scale);
    q = std::clamp(q, -127l, 127l);
    view.qweights[i] = static_cast<int8_t>(q);
    view.shadow[i] = view.scale * static_cast<float>(q);
    w[i] = view.shadow[i];  // install the dequantized value
  }
  auto [it, inserted] = quantized.insert_or_assign(layer_name, std::move(view));
  return it->second;
}

void Model::quantize_all_weight_layers() {
  for (const auto& name : weight_layer_names()) quantize_layer(name);
}

void QuantizedLayerView::flip_bit(int64_t index, int bit) {
  if (index < 0 || index >= param_count())
    throw std::out_of_range("flip_bit: index " + std::to_string(index) + " out of range [0," +
                            std::to_string(param_count()) + ")");
  if (bit < 0 || bit > 7)
    throw std::out_of_range("flip_bit: bit " + std::to_string(bit) + " out of range 0..7");
  uint8_t raw = static_cast<uint8_t>(qweights[index]);
  raw ^= static_cast<uint8_t>(1u << bit);
  qweights[index] = static_cast<int8_t>(raw);
  shadow[index] = scale * static_cast<float>(qweights[index]);
  param->tensor.data()[index] = shadow[index];
}

Model Model::clone() const {
  Model out = build_model(config);
  auto dst = out.parameters();
  auto src = parameters();
  for (size_t i = 0; i < src.size(); ++i) {
    dst[i]->tensor.data() = src[i]->tensor.data();
    dst[i]->m = src[i]->m;
    dst[i]->v = src[i]->v;
    dst[i]->step_count = src[i]->step_count;
  }
  out.phase = phase;
  for (const auto& [name, view] : quantized) {
    QuantizedLayerView copy = view;
    copy.param = out.find_parameter(name);
    out.quantized.insert_or_assign(name, std::move(copy));
  }
  return out;
}

// ---------------------------------------------------------------------------
// checkpoint container

namespace {

constexpr char kMagic[4] = {'C', 'F', 'D', 'R'};
constexpr uint32_t kVersion = 1;

void append_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xFF));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xFF));
  out.push_back(static_cast<uint8_t>((v >> 16) & 0xFF));
  out.push_back(static_cast<uint8_t>((v >> 24) & 0xFF));
}

}  // namespace

std::vector<uint8_t> save_checkpoint(const Model& model,
                                     const std::optional<std::string>& profile_json) {
  json header;
  header["config"] = json::parse(model.config.to_json());
  json layers = json::array();
  for (const auto* p : model.parameters()) {
    json rec;
    rec["name"] = p->name;
    rec["shape"] = p->tensor.shape();
    rec["dtype"] = "f32";
    layers.push_back(rec);
  }
  header["layers"] = layers;
  header["meta"] = {{"phase", model.phase},
                    {"seed", model.config.seed},
                    {"config_hash", model.config.hash()}};
  json quant = json::array();
  for (const auto& [name, view] : model.quantized) quant.push_back({{"name", name}, {"scale", view.scale}});
  header["quant"] = quant;
  header["has_profile"] = profile_json.has_value();

  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  append_u32(out, kVersion);
  std::string hs = header.dump();
  out.insert(out.end(), hs.begin(), hs.end());
  out.push_back('\n');
  for (const auto* p : model.parameters()) {
    const auto& d = p->tensor.data();
    size_t off = out.size();
    out.resize(off + d.size() * sizeof(float));
    std::memcpy(out.data() + off, d.data(), d.size() * sizeof(float));
  }
  if (profile_json) {
    out.insert(out.end(), profile_json->begin(), profile_json->end());
    out.push_back('\n');
  }
  return out;
}

Model load_checkpoint(const std::vector<uint8_t>& bytes, std::string* profile_json_out) {
  if (bytes.size() < 8) throw std::runtime_error("checkpoint truncated at byte " +
                                                 std::to_string(bytes.size()) +
                                                 ": expected at least 8 header bytes");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw std::runtime_error("checkpoint has bad magic (expected \"CFDR\")");
  uint32_t version = static_cast<uint32_t>(bytes[4]) | (static_cast<uint32_t>(bytes[5]) << 8) |
                     (static_cast<uint32_t>(bytes[6]) << 16) |
                     (static_cast<uint32_t>(bytes[7]) << 24);
  if (version != kVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(version) +
                             " unsupported (expected " + std::to_string(kVersion) + ")");

  size_t header_end = 8;
  while (header_end < bytes.size() && bytes[header_end] != '\n') ++header_end;
  if (header_end == bytes.size())
    throw std::runtime_error("checkpoint truncated at byte " + std::to_string(bytes.size()) +
                             ": unterminated header");
  std::string hs(bytes.begin() + 8, bytes.begin() + header_end);
  json header;
  try {
    header = json::parse(hs);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Model model = build_model(ModelConfig::from_json(header.at("config").dump()));
  model.phase = header.at("meta").value("phase", "none");

  size_t off = header_end + 1;
  for (const auto& rec : header.at("layers")) {
    std::string name = rec.at("name").get<std::string>();
    Parameter* p = model.find_parameter(name);
    if (!p) throw std::runtime_error("checkpoint names unknown layer '" + name + "'");
    Shape shape = rec.at("shape").get<Shape>();
    if (shape != p->tensor.shape())
      throw std::runtime_error("checkpoint layer '" + name + "' has shape " + shape_str(shape) +
                               ", model expects " + shape_str(p->tensor.shape()));
    size_t nbytes = static_cast<size_t>(shape_numel(shape)) * sizeof(float);
    if (off + nbytes > bytes.size())
      throw std::runtime_error("checkpoint truncated at byte " + std::to_string(bytes.size()) +
                               ": layer '" + name + "' needs bytes [" + std::to_string(off) + "," +
                               std::to_string(off + nbytes) + ")");
    std::memcpy(p->tensor.data().data(), bytes.data() + off, nbytes);
    off += nbytes;
  }

  // rebuild int8 views from the stored scales; the installed floats are exact
  // multiples of scale, so rounding recovers the quantized values bit-exactly
  for (const auto& rec : header.at("quant")) {
    std::string name = rec.at("name").get<std::string>();
    float scale = rec.at("scale").get<float>();
    Parameter* p = model.find_parameter(name);
    if (!p) throw std::runtime_error("checkpoint quant record names unknown layer '" + name + "'");
    QuantizedLayerView view;
    view.layer_name = name;
    view.param = p;
    view.scale = scale;
    auto& w = p->tensor.data();
    view.qweights.resize(w.size());
    view.shadow.resize(w.size());
    for (size_t i = 0; i < w.size(); ++i) {
      view.qweights[i] = static_cast<int8_t>(
          std::lround(static_cast<double>(w[i]) / static_cast<double>(scale)));
      view.shadow[i] = w[i];
    }
    model.quantized.insert_or_assign(name, std::move(view));
  }

  if (header.value("has_profile", false)) {
    size_t prof_end = off;
    while (prof_end < bytes.size() && bytes[prof_end] != '\n') ++prof_end;
    if (prof_end == bytes.size())
      throw std::runtime_error("checkpoint truncated at byte " + std::to_string(bytes.size()) +
                               ": unterminated profile record");
    if (profile_json_out) profile_json_out->assign(bytes.begin() + off, bytes.begin() + prof_end);
    off = prof_end + 1;
  } else if (profile_json_out) {
    profile_json_out->clear();
  }

  if (off != bytes.size())
    throw std::runtime_error("checkpoint has " + std::to_string(bytes.size() - off) +
                             " trailing bytes at offset " + std::to_string(off));
  return model;
}

void save_checkpoint_file(const Model& model, const std::string& path,
                          const std::optional<std::string>& profile_json) {
  auto bytes = save_checkpoint(model, profile_json);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("short write to " + path);
}

Model load_checkpoint_file(const std::string& path, std::string* profile_json_out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return load_checkpoint(bytes, profile_json_out);
}

// ---------------------------------------------------------------------------
// evaluation

namespace {

template <typename Fn>
void for_each_batch(int64_t n, int batch, Fn&& fn) {
  for (int64_t start = 0; start < n; start += batch) {
    int64_t end = std::min<int64_t>(start + batch, n);
    std::vector<int64_t> idx(end - start);
    for (int64_t i = start; i < end; ++i) idx[i - start] = i;
    fn(idx);
  }
}

}  // namespace

std::vector<int> predict_labels(const Model& model, const Dataset& data, int batch) {
  NoGradGuard ng;
  std::vector<int> out;
  out.reserve(data.size());
  for_each_batch(data.size(), batch, [&](const std::vector<int64_t>& idx) {
    Tensor logits = model.classify(model.encode(data.to_tensor(idx)));
    int64_t c = logits.dim(1);
    for (size_t r = 0; r < idx.size(); ++r) {
      const float* row = logits.data().data() + r * c;
      int best = 0;
      for (int64_t j = 1; j < c; ++j)
        if (row[j] > row[best]) best = static_cast<int>(j);
      out.push_back(best);
    }
  });
  return out;
}

double evaluate_accuracy(const Model& model, const Dataset& data, int batch) {
  if (!data.labeled()) throw std::runtime_error("evaluate_accuracy requires a labeled dataset");
  if (data.size() == 0) throw std::runtime_error("evaluate_accuracy on empty dataset");
  std::vector<int> pred = predict_labels(model, data, batch);
  int64_t correct = 0;
  for (int64_t i = 0; i < data.size(); ++i)
    if (pred[i] == data.labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double evaluate_cross_entropy(const Model& model, const Dataset& data, int batch) {
  if (!data.labeled()) throw std::runtime_error("evaluate_cross_entropy requires labels");
  NoGradGuard ng;
  double total = 0.0;
  for_each_batch(data.size(), batch, [&](const std::vector<int64_t>& idx) {
    Tensor logits = model.classify(model.encode(data.to_tensor(idx)));
    Tensor ce = cross_entropy(logits, data.label_subset(idx));
    total += static_cast<double>(ce.item()) * static_cast<double>(idx.size());
  });
  return total / static_cast<double>(data.size());
}

std::vector<uint8_t> parameter_bytes(const Model& model) {
  std::vector<uint8_t> out;
  for (const auto* p : model.parameters()) {
    const auto& d = p->tensor.data();
    size_t off = out.size();
    out.resize(off + d.size() * sizeof(float));
    std::memcpy(out.data() + off, d.data(), d.size() * sizeof(float));
  }
  return out;
}

}  // namespace cfdr
