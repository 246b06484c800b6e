#include "fbn/models.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace fbn {

namespace {

const std::vector<std::string> kLenetSlots = {"conv1", "conv2", "fc120", "fc84"};
const std::vector<std::string> kMlpSlots = {"fc1", "fc2"};

struct ParamDef {
  std::string name;
  std::vector<size_t> shape;
  size_t fan_in;
};

std::vector<ParamDef> param_defs(const std::string& arch) {
  if (arch == "lenet5") {
    return {
        {"conv1.w", {6, 1, 5, 5}, 1 * 5 * 5},   {"conv1.b", {6}, 1 * 5 * 5},
        {"conv2.w", {16, 6, 5, 5}, 6 * 5 * 5},  {"conv2.b", {16}, 6 * 5 * 5},
        {"fc120.w", {120, 400}, 400},           {"fc120.b", {120}, 400},
        {"fc84.w", {84, 120}, 120},             {"fc84.b", {84}, 120},
        {"logits.w", {10, 84}, 84},             {"logits.b", {10}, 84},
    };
  }
  if (arch == "mlp") {
    return {
        {"fc1.w", {256, 784}, 784}, {"fc1.b", {256}, 784},
        {"fc2.w", {128, 256}, 256}, {"fc2.b", {128}, 256},
        {"logits.w", {10, 128}, 128}, {"logits.b", {10}, 128},
    };
  }
  throw std::invalid_argument("unknown architecture: " + arch);
}

size_t slot_channels(const std::string& arch, const std::string& slot) {
  for (const auto& d : param_defs(arch))
    if (d.name == slot + ".w") return d.shape[0];
  throw std::invalid_argument("unknown norm slot: " + slot);
}

}  // namespace

const std::vector<std::string>& ModelSpec::slot_names(const std::string& architecture) {
  if (architecture == "lenet5") return kLenetSlots;
  if (architecture == "mlp") return kMlpSlots;
  throw std::invalid_argument("unknown architecture: " + architecture);
}

void ModelSpec::set_all_slots(const std::string& kind) {
  for (const auto& s : slot_names(architecture)) slot_norms[s] = kind;
}

void ModelSpec::validate() const {
  const auto& names = slot_names(architecture);
  for (const auto& [slot, kind] : slot_norms) {
    if (std::find(names.begin(), names.end(), slot) == names.end())
      throw std::invalid_argument("unknown norm slot: " + slot);
    if (kind != "none") norm_kind_from_name(kind);  // throws on bad name
  }
}

Model::Model(const ModelSpec& spec) : spec_(spec) {
  spec_.validate();
  init_params();
  for (const auto& [slot, kind] : spec_.slot_norms) {
    if (kind == "none") continue;
    NormConfig cfg = spec_.norm;
    cfg.kind = norm_kind_from_name(kind);
    NormLayer layer;
    layer.init(slot_channels(spec_.architecture, slot), cfg);
    norms_.emplace(slot, std::move(layer));
  }
}

void Model::init_params() {
  auto defs = param_defs(spec_.architecture);
  std::mt19937_64 rng(spec_.seed);
  for (const auto& d : defs) {
    double bound = 1.0 / std::sqrt(double(d.fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor t(d.shape);
    for (size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
    param_names_.push_back(d.name);
    params_.emplace_back(std::move(t));
  }
}

Parameter& Model::p(const std::string& name) {
  for (size_t i = 0; i < param_names_.size(); ++i)
    if (param_names_[i] == name) return params_[i];
  throw std::logic_error("no such parameter: " + name);
}

int Model::norm_slot(Tape& tape, int x, const std::string& slot, ForwardMode mode) {
  auto it = norms_.find(slot);
  if (it == norms_.end()) return x;
  return tape.norm(x, it->second, mode);
}

int Model::forward(Tape& tape, const Tensor& x, ForwardMode mode) {
  const auto& shp = x.shape();
  int h;
  if (spec_.architecture == "lenet5") {
    if (shp.size() != 4 || shp[1] != 1 || shp[2] != 28 || shp[3] != 28)
      throw std::invalid_argument("lenet5 expects input [N,1,28,28]");
    h = tape.input(x);
    h = tape.conv2d(h, p("conv1.w"), p("conv1.b"), 1, 2);
    h = norm_slot(tape, h, "conv1", mode);
    h = tape.relu(h);
    h = tape.max_pool2d(h, 2, 2);
    h = tape.conv2d(h, p("conv2.w"), p("conv2.b"), 1, 0);
    h = norm_slot(tape, h, "conv2", mode);
    h = tape.relu(h);
    h = tape.max_pool2d(h, 2, 2);
    h = tape.flatten(h);
    h = tape.linear(h, p("fc120.w"), p("fc120.b"));
    h = norm_slot(tape, h, "fc120", mode);
    h = tape.relu(h);
    h = tape.linear(h, p("fc84.w"), p("fc84.b"));
    h = norm_slot(tape, h, "fc84", mode);
    h = tape.relu(h);
    return tape.linear(h, p("logits.w"), p("logits.b"));
  }
  if (spec_.architecture == "mlp") {
    Tensor flat = x;
    if (shp.size() == 4) flat.reshape({shp[0], shp[1] * shp[2] * shp[3]});
    if (flat.shape().size() != 2 || flat.shape()[1] != 784)
      throw std::invalid_argument("mlp expects input with 784 features");
    h = tape.input(flat);
    h = tape.linear(h, p("fc1.w"), p("fc1.b"));
    h = norm_slot(tape, h, "fc1", mode);
    h = tape.relu(h);
    h = tape.linear(h, p("fc2.w"), p("fc2.b"));
    h = norm_slot(tape, h, "fc2", mode);
    h = tape.relu(h);
    return tape.linear(h, p("logits.w"), p("logits.b"));
  }
  throw std::invalid_argument("unknown architecture: " + spec_.architecture);
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  for (auto& prm : params_) out.push_back(&prm);
  for (auto& [slot, layer] : norms_) {
    out.push_back(&layer.affine.gamma);
    out.push_back(&layer.affine.beta);
  }
  return out;
}

std::vector<std::pair<std::string, Parameter*>> Model::named_parameters() {
  std::vector<std::pair<std::string, Parameter*>> out;
  for (size_t i = 0; i < params_.size(); ++i) out.emplace_back(param_names_[i], &params_[i]);
  return out;
}

std::vector<std::pair<std::string, NormLayer*>> Model::norm_layers() {
  std::vector<std::pair<std::string, NormLayer*>> out;
  for (auto& [slot, layer] : norms_) out.emplace_back(slot, &layer);
  return out;
}

size_t Model::parameter_count() const {
  size_t n = 0;
  for (const auto& prm : params_) n += prm.value.size();
  for (const auto& [slot, layer] : norms_)
    n += layer.affine.gamma.value.size() + layer.affine.beta.value.size();
  return n;
}

void Model::zero_grad() {
  for (Parameter* prm : parameters()) prm->zero_grad();
}

}  // namespace fbn
