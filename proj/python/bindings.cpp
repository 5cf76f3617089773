// python bindings for the main operations: dataset handling, the two-phase
// model, parameter-tampering attacks, loss-based detection, and recovery

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cfdr/attacks.hpp"
#include "cfdr/contrastive.hpp"
#include "cfdr/dataset.hpp"
#include "cfdr/detector.hpp"
#include "cfdr/experiment.hpp"
#include "cfdr/model.hpp"
#include "cfdr/recovery.hpp"
#include "cfdr/sha256.hpp"
#include "cfdr/tensor.hpp"

namespace py = pybind11;
using namespace cfdr;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor tensor_from_numpy(const FloatArray& arr) {
  Shape shape(arr.ndim());
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[i] = arr.shape(i);
  std::vector<float> data(arr.data(), arr.data() + arr.size());
  return Tensor::from_data(shape, std::move(data));
}

py::array_t<float> tensor_to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::bytes checkpoint_bytes(const Model& m, const std::optional<std::string>& profile) {
  auto bytes = save_checkpoint(m, profile);
  return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

}  // namespace

PYBIND11_MODULE(_cfdr, m) {
  m.doc() = "contrastive-loss based fault-injection detection and recovery testbed";

  // ---- dataset
  py::class_<Dataset>(m, "Dataset")
      .def(py::init<>())
      .def_property_readonly("size", &Dataset::size)
      .def_property_readonly("labeled", &Dataset::labeled)
      .def_readwrite("split", &Dataset::split)
      .def_readwrite("provenance", &Dataset::provenance)
      .def("labels",
           [](const Dataset& d) { return std::vector<int>(d.labels.begin(), d.labels.end()); })
      .def("subset", &Dataset::subset)
      .def("without_labels", &Dataset::without_labels)
      .def("images",
           [](const Dataset& d) { return tensor_to_numpy(d.to_tensor()); },
           "all images as a float [N,3,32,32] array in [0,1]");

  m.def("make_synthetic_blobs", &make_synthetic_blobs, py::arg("n"), py::arg("classes") = 10,
        py::arg("seed") = 0);
  m.def("load_cifar10", &load_cifar10, py::arg("dir"), py::arg("split"));
  m.def("serialize_cifar10", [](const Dataset& d) {
    auto bytes = serialize_cifar10(d);
    return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  });

  // ---- model
  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("preset", &ModelConfig::preset)
      .def_readwrite("embedding_dim", &ModelConfig::embedding_dim)
      .def_readwrite("proj_hidden_dim", &ModelConfig::proj_hidden_dim)
      .def_readwrite("proj_dim", &ModelConfig::proj_dim)
      .def_readwrite("num_classes", &ModelConfig::num_classes)
      .def_readwrite("seed", &ModelConfig::seed);

  py::class_<Model>(m, "Model")
      .def_property_readonly("preset", [](const Model& mm) { return mm.config.preset; })
      .def_property_readonly("phase", [](const Model& mm) { return mm.phase; })
      .def("encode", [](const Model& mm, const FloatArray& x) {
        return tensor_to_numpy(mm.encode(tensor_from_numpy(x)));
      })
      .def("project", [](const Model& mm, const FloatArray& h) {
        return tensor_to_numpy(mm.project(tensor_from_numpy(h)));
      })
      .def("classify", [](const Model& mm, const FloatArray& h) {
        return tensor_to_numpy(mm.classify(tensor_from_numpy(h)));
      })
      .def("parameter_names",
           [](const Model& mm) {
             std::vector<std::string> names;
             for (const auto* p : mm.parameters()) names.push_back(p->name);
             return names;
           })
      .def("parameter", [](Model& mm, const std::string& name) {
        Parameter* p = mm.find_parameter(name);
        if (!p) throw std::invalid_argument("unknown parameter '" + name + "'");
        return tensor_to_numpy(p->tensor);
      })
      .def("weight_layer_names", &Model::weight_layer_names)
      .def("quantize_layer",
           [](Model& mm, const std::string& name) -> QuantizedLayerView& {
             return mm.quantize_layer(name);
           },
           py::return_value_policy::reference_internal)
      .def("quantize_all_weight_layers", &Model::quantize_all_weight_layers)
      .def("quantized_view",
           [](Model& mm, const std::string& name) -> QuantizedLayerView& {
             auto it = mm.quantized.find(name);
             if (it == mm.quantized.end())
               throw std::invalid_argument("layer '" + name + "' is not quantized");
             return it->second;
           },
           py::return_value_policy::reference_internal)
      .def("clone", &Model::clone);

  py::class_<QuantizedLayerView>(m, "QuantizedLayerView")
      .def_readonly("layer_name", &QuantizedLayerView::layer_name)
      .def_readonly("scale", &QuantizedLayerView::scale)
      .def_property_readonly("qweights",
                             [](const QuantizedLayerView& v) {
                               return std::vector<int>(v.qweights.begin(), v.qweights.end());
                             })
      .def("flip_bit", &QuantizedLayerView::flip_bit, py::arg("index"), py::arg("bit"));

  m.def("build_model", &build_model);
  m.def("save_checkpoint", &checkpoint_bytes, py::arg("model"),
        py::arg("profile_json") = std::nullopt);
  m.def("load_checkpoint", [](const py::bytes& raw) {
    std::string s = raw;
    std::vector<uint8_t> bytes(s.begin(), s.end());
    std::string profile;
    Model model = load_checkpoint(bytes, &profile);
    return py::make_tuple(std::move(model), profile);
  });
  m.def("save_checkpoint_file", &save_checkpoint_file, py::arg("model"), py::arg("path"),
        py::arg("profile_json") = std::nullopt);
  m.def("load_checkpoint_file", [](const std::string& path) {
    std::string profile;
    Model model = load_checkpoint_file(path, &profile);
    return py::make_tuple(std::move(model), profile);
  });
  m.def("evaluate_accuracy", &evaluate_accuracy, py::arg("model"), py::arg("data"),
        py::arg("batch") = 64);
  m.def("predict_labels", &predict_labels, py::arg("model"), py::arg("data"),
        py::arg("batch") = 64);

  // ---- contrastive
  py::class_<AugmentationConfig>(m, "AugmentationConfig")
      .def(py::init<>())
      .def_readwrite("crop_lo", &AugmentationConfig::crop_lo)
      .def_readwrite("crop_hi", &AugmentationConfig::crop_hi)
      .def_readwrite("flip_prob", &AugmentationConfig::flip_prob)
      .def_readwrite("jitter_strength", &AugmentationConfig::jitter_strength)
      .def_readwrite("grayscale_prob", &AugmentationConfig::grayscale_prob)
      .def_readwrite("seed", &AugmentationConfig::seed);

  py::enum_<Reduction>(m, "Reduction").value("sum", Reduction::sum).value("mean", Reduction::mean);

  py::class_<LossConfig>(m, "LossConfig")
      .def(py::init<>())
      .def_readwrite("temperature", &LossConfig::temperature)
      .def_readwrite("reduction", &LossConfig::reduction)
      .def_readwrite("exclude_positive_in_denominator",
                     &LossConfig::exclude_positive_in_denominator);

  py::class_<OptimizerConfig>(m, "OptimizerConfig")
      .def(py::init<>())
      .def_readwrite("lr", &OptimizerConfig::lr)
      .def_property(
          "kind",
          [](const OptimizerConfig& c) { return c.kind == OptimizerKind::sgd ? "sgd" : "adam"; },
          [](OptimizerConfig& c, const std::string& k) {
            c.kind = k == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
          });

  m.def("augment_pair",
        [](const FloatArray& images, const AugmentationConfig& cfg, int64_t batch_index) {
          ContrastiveBatch b = augment_pair(tensor_from_numpy(images), cfg, batch_index);
          return py::make_tuple(tensor_to_numpy(b.view_a), tensor_to_numpy(b.view_b));
        },
        py::arg("images"), py::arg("cfg"), py::arg("batch_index") = 0);
  m.def("cosine_sim", [](const std::vector<float>& u, const std::vector<float>& v) {
    return cosine_sim(u, v);
  });
  m.def("contrastive_loss",
        [](const FloatArray& za, const FloatArray& zb, const LossConfig& cfg) {
          return contrastive_loss_value(tensor_from_numpy(za), tensor_from_numpy(zb), cfg);
        },
        py::arg("z_a"), py::arg("z_b"), py::arg("cfg") = LossConfig{});

  py::class_<TrainLogEntry>(m, "TrainLogEntry")
      .def_readonly("epoch", &TrainLogEntry::epoch)
      .def_readonly("mean_loss", &TrainLogEntry::mean_loss)
      .def_readonly("wall_ms", &TrainLogEntry::wall_ms);
  py::class_<TrainLog>(m, "TrainLog")
      .def_readonly("entries", &TrainLog::entries)
      .def("to_csv", &TrainLog::to_csv, py::arg("include_wall_ms") = true);

  m.def("train_phase_a", &train_phase_a, py::arg("model"), py::arg("data"), py::arg("epochs"),
        py::arg("batch") = 64, py::arg("aug") = AugmentationConfig{},
        py::arg("loss") = LossConfig{}, py::arg("opt") = OptimizerConfig{}, py::arg("seed") = 0);
  m.def("train_phase_b", &train_phase_b, py::arg("model"), py::arg("data"), py::arg("epochs"),
        py::arg("batch") = 64, py::arg("opt") = OptimizerConfig{}, py::arg("seed") = 0);

  // ---- detector
  py::class_<DetectorConfig>(m, "DetectorConfig")
      .def(py::init<>())
      .def_readwrite("batch", &DetectorConfig::batch)
      .def_readwrite("aug", &DetectorConfig::aug)
      .def_readwrite("loss", &DetectorConfig::loss);

  py::class_<ReferenceProfile>(m, "ReferenceProfile")
      .def(py::init<>())
      .def_readwrite("l_c", &ReferenceProfile::l_c)
      .def_readwrite("sigma_c", &ReferenceProfile::sigma_c)
      .def_readwrite("n_samples", &ReferenceProfile::n_samples)
      .def("to_json", &ReferenceProfile::to_json)
      .def_static("from_json", &ReferenceProfile::from_json);

  py::class_<DetectionVerdict>(m, "DetectionVerdict")
      .def_readonly("l_d", &DetectionVerdict::l_d)
      .def_readonly("l_c", &DetectionVerdict::l_c)
      .def_readonly("delta", &DetectionVerdict::delta)
      .def_readonly("attacked", &DetectionVerdict::attacked)
      .def_readonly("batches_used", &DetectionVerdict::batches_used)
      .def("to_json", &DetectionVerdict::to_json);

  m.def("build_reference",
        [](const Model& model, const Dataset& data, int n_samples, const DetectorConfig& cfg,
           uint64_t seed) { return build_reference(model, data, n_samples, cfg, seed); },
        py::arg("model"), py::arg("data"), py::arg("n_samples") = 1000, py::arg("cfg"),
        py::arg("seed") = 0);
  m.def("sample_loss",
        [](const Model& model, const FloatArray& batch, const DetectorConfig& cfg,
           int64_t batch_index) {
          SampleResult r = sample_loss(model, tensor_from_numpy(batch), cfg, batch_index);
          return py::make_tuple(r.loss, tensor_to_numpy(r.logits));
        },
        py::arg("model"), py::arg("batch"), py::arg("cfg"), py::arg("batch_index") = 0);
  m.def("default_delta", &default_delta);
  m.def("detect", &detect, py::arg("profile"), py::arg("model"), py::arg("data"),
        py::arg("delta"), py::arg("n_batches") = 1, py::arg("cfg"), py::arg("seed") = 0);

  // ---- attacks
  py::class_<AttackReport>(m, "AttackReport")
      .def_readonly("attack_kind", &AttackReport::attack_kind)
      .def_readonly("layers_touched", &AttackReport::layers_touched)
      .def_readonly("params_modified", &AttackReport::params_modified)
      .def_readonly("bits_flipped", &AttackReport::bits_flipped)
      .def_readonly("acc_before", &AttackReport::acc_before)
      .def_readonly("acc_after", &AttackReport::acc_after)
      .def_readonly("iterations", &AttackReport::iterations)
      .def_readonly("success", &AttackReport::success)
      .def_readonly("trajectory", &AttackReport::trajectory)
      .def("to_json", &AttackReport::to_json);

  py::class_<PbsConfig>(m, "PbsConfig")
      .def(py::init<>())
      .def_readwrite("target_acc", &PbsConfig::target_acc)
      .def_readwrite("trial_k", &PbsConfig::trial_k)
      .def_readwrite("max_flips", &PbsConfig::max_flips);

  py::class_<FsaConfig>(m, "FsaConfig")
      .def(py::init<>())
      .def_readwrite("S", &FsaConfig::S)
      .def_readwrite("R", &FsaConfig::R)
      .def_readwrite("target_labels", &FsaConfig::target_labels)
      .def_readwrite("norm", &FsaConfig::norm)
      .def_readwrite("rho", &FsaConfig::rho)
      .def_readwrite("max_iters", &FsaConfig::max_iters)
      .def_readwrite("layer", &FsaConfig::layer)
      .def_readwrite("l0_keep", &FsaConfig::l0_keep);

  py::class_<GdaConfig>(m, "GdaConfig")
      .def(py::init<>())
      .def_readwrite("target_class", &GdaConfig::target_class)
      .def_readwrite("lr", &GdaConfig::lr)
      .def_readwrite("l2_coef", &GdaConfig::l2_coef)
      .def_readwrite("max_iters", &GdaConfig::max_iters)
      .def_readwrite("layer", &GdaConfig::layer);

  m.def("pbs_attack", &pbs_attack, py::arg("model"), py::arg("attack_batch"), py::arg("heldout"),
        py::arg("cfg") = PbsConfig{});
  m.def("fsa_attack", &fsa_attack, py::arg("model"), py::arg("constrained"), py::arg("eval"),
        py::arg("cfg"));
  m.def("gda_attack", &gda_attack, py::arg("model"), py::arg("source_images"), py::arg("eval"),
        py::arg("cfg"));
  m.def("random_bit_flip", &random_bit_flip, py::arg("model"), py::arg("layer"),
        py::arg("n_bits"), py::arg("seed"), py::arg("eval"), py::arg("msb_only") = false);
  m.def("select_fsa_constrained",
        [](const Dataset& pool, const Model& model, int S, int R, uint64_t seed) {
          std::vector<int> targets;
          Dataset d = select_fsa_constrained(pool, model, S, R, seed, targets);
          return py::make_tuple(std::move(d), targets);
        },
        py::arg("pool"), py::arg("model"), py::arg("S") = 5, py::arg("R") = 20,
        py::arg("seed") = 0);

  // ---- recovery
  py::enum_<StopReason>(m, "StopReason")
      .value("reference_reached", StopReason::reference_reached)
      .value("plateau", StopReason::plateau)
      .value("epoch_cap", StopReason::epoch_cap);

  py::class_<RecoveryConfig>(m, "RecoveryConfig")
      .def(py::init<>())
      .def_readwrite("labeled", &RecoveryConfig::labeled)
      .def_readwrite("data_budget", &RecoveryConfig::data_budget)
      .def_readwrite("batch", &RecoveryConfig::batch)
      .def_readwrite("epoch_cap", &RecoveryConfig::epoch_cap)
      .def_readwrite("patience", &RecoveryConfig::patience)
      .def_readwrite("min_rel_improve", &RecoveryConfig::min_rel_improve)
      .def_readwrite("ref_contrastive", &RecoveryConfig::ref_contrastive)
      .def_readwrite("ref_cross_entropy", &RecoveryConfig::ref_cross_entropy)
      .def_readwrite("aug", &RecoveryConfig::aug)
      .def_readwrite("loss", &RecoveryConfig::loss)
      .def_readwrite("opt_a", &RecoveryConfig::opt_a)
      .def_readwrite("opt_b", &RecoveryConfig::opt_b)
      .def_readwrite("seed", &RecoveryConfig::seed);

  py::class_<RecoveryReport>(m, "RecoveryReport")
      .def_readonly("acc_before", &RecoveryReport::acc_before)
      .def_readonly("acc_after", &RecoveryReport::acc_after)
      .def_readonly("epochs_used", &RecoveryReport::epochs_used)
      .def_readonly("epochs_a", &RecoveryReport::epochs_a)
      .def_readonly("epochs_b", &RecoveryReport::epochs_b)
      .def_readonly("stop_reason", &RecoveryReport::stop_reason)
      .def_readonly("phase_b_run", &RecoveryReport::phase_b_run)
      .def_readonly("loss_trajectory_a", &RecoveryReport::loss_trajectory_a)
      .def_readonly("loss_trajectory_b", &RecoveryReport::loss_trajectory_b)
      .def("to_json", &RecoveryReport::to_json);

  m.def("recover", &recover, py::arg("model"), py::arg("recovery_data"), py::arg("eval_data"),
        py::arg("cfg"));
  m.def("detect_and_recover", &detect_and_recover, py::arg("model"), py::arg("detect_data"),
        py::arg("recover_data"), py::arg("eval_data"), py::arg("profile"), py::arg("delta"),
        py::arg("det_cfg"), py::arg("rec_cfg"));

  // ---- experiment
  m.def("run_experiment", [](const std::string& config_json) {
    ExperimentConfig cfg = ExperimentConfig::from_json(config_json);
    ExperimentResult res = run_experiment(cfg);
    py::dict out;
    out["clean_acc"] = res.clean_acc;
    out["l_c"] = res.profile.l_c;
    out["sigma_c"] = res.profile.sigma_c;
    out["artifacts"] = res.artifacts;
    return out;
  });
  m.def("sha256_hex", [](const py::bytes& raw) {
    std::string s = raw;
    return sha256_hex(s);
  });
}
