#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cfdr/dataset.hpp"
#include "cfdr/optim.hpp"
#include "cfdr/tensor.hpp"

namespace cfdr {

struct ModelConfig {
  std::string preset = "tiny";  // "tiny" | "resnet-lite"
  int base_channels = 16;       // width of the first conv; later stages scale from it
  int embedding_dim = 64;
  int proj_hidden_dim = 64;
  int proj_dim = 32;
  int num_classes = 10;
  uint64_t seed = 0;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& js);
  uint64_t hash() const;
};

// Per-layer symmetric int8 view of a weight tensor. Creating the view rounds
// the model's float weights onto the int8 grid and installs the dequantized
// values, so bit flips and the floats the network computes with stay in sync.
struct QuantizedLayerView {
  std::string layer_name;
  float scale = 1.0f;  // max|w| / 127 at creation; 1.0 for an all-zero layer
  std::vector<int8_t> qweights;
  std::vector<float> shadow;  // dequantized floats currently installed
  Parameter* param = nullptr;

  void flip_bit(int64_t index, int bit);
  int64_t param_count() const { return static_cast<int64_t>(qweights.size()); }
};

struct Conv2dLayer {
  Parameter weight;  // [out, in, kh, kw]
  Parameter bias;    // [out]
  int stride = 1;
  int pad = 1;
};

struct LinearLayer {
  Parameter weight;  // [out, in]
  Parameter bias;    // [out]
};

// Encoder + one-hidden-layer projection head + linear classifier. The
// projection head and the classifier share the encoder output, so the
// contrastive path can run alongside normal inference on the same embedding.
class Model {
 public:
  ModelConfig config;

  std::vector<Conv2dLayer> encoder_convs;  // preset-specific interpretation
  LinearLayer proj_fc1, proj_fc2;
  LinearLayer classifier;

  std::map<std::string, QuantizedLayerView> quantized;  // active int8 views by layer name

  Tensor encode(const Tensor& images) const;  // [B,3,H,W] -> [B, embedding_dim]
  Tensor project(const Tensor& h) const;      // [B, embedding_dim] -> [B, proj_dim]
  Tensor classify(const Tensor& h) const;     // [B, embedding_dim] -> [B, num_classes]

  std::vector<Parameter*> parameters();
  std::vector<Parameter*> encoder_parameters();
  std::vector<Parameter*> projection_parameters();
  std::vector<Parameter*> classifier_parameters();
  std::vector<const Parameter*> parameters() const;

  Parameter* find_parameter(const std::string& name);
  const Parameter* find_parameter(const std::string& name) const;
  // weight tensors an attack can target, in declaration order
  std::vector<std::string> weight_layer_names() const;

  QuantizedLayerView& quantize_layer(const std::string& layer_name);
  void quantize_all_weight_layers();

  Model clone() const;

  std::string phase = "none";  // training phase completed: none | a | a+b
};

Model build_model(const ModelConfig& cfg);

// --- checkpoint container ---------------------------------------------------
// magic "CFDR", u32 version, one-line JSON header, raw little-endian float32
// payload per layer record, then an optional profile JSON line.
std::vector<uint8_t> save_checkpoint(const Model& model,
                                     const std::optional<std::string>& profile_json = std::nullopt);
Model load_checkpoint(const std::vector<uint8_t>& bytes, std::string* profile_json_out = nullptr);

void save_checkpoint_file(const Model& model, const std::string& path,
                          const std::optional<std::string>& profile_json = std::nullopt);
Model load_checkpoint_file(const std::string& path, std::string* profile_json_out = nullptr);

// --- evaluation helpers ------------------------------------------------------
// top-1 accuracy over a labeled dataset, batched, no gradients
double evaluate_accuracy(const Model& model, const Dataset& data, int batch = 64);
// mean cross-entropy over a labeled dataset
double evaluate_cross_entropy(const Model& model, const Dataset& data, int batch = 64);
std::vector<int> predict_labels(const Model& model, const Dataset& data, int batch = 64);

// byte image of every parameter in declaration order (for locality audits)
std::vector<uint8_t> parameter_bytes(const Model& model);

}  // namespace cfdr
