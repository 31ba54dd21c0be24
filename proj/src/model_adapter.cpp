#include "dtcav/model_adapter.hpp"

#include <fstream>

#include <json.hpp>

#include "dtcav/npy.hpp"
#include "dtcav/random.hpp"

namespace dtcav {

namespace fs = std::filesystem;

std::string_view to_string(TargetClass t) {
  switch (t) {
    case TargetClass::LV: return "lv";
    case TargetClass::RV: return "rv";
    case TargetClass::MYO: return "myo";
    case TargetClass::FOREGROUND_SUM: return "foreground_sum";
  }
  return "?";
}

std::optional<TargetClass> parse_target(std::string_view s) {
  for (auto t : {TargetClass::LV, TargetClass::RV, TargetClass::MYO, TargetClass::FOREGROUND_SUM})
    if (to_string(t) == s) return t;
  return std::nullopt;
}

std::vector<LatentVector> ModelAdapter::activations(std::span<const ModelInput> inputs) const {
  const Eigen::MatrixXd m = activation_matrix(inputs);
  std::vector<LatentVector> out;
  out.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i)
    out.push_back({m.row(static_cast<Eigen::Index>(i)).transpose(), inputs[i].id});
  return out;
}

std::vector<GradientVector> ModelAdapter::gradients(std::span<const ModelInput> inputs, TargetClass target) const {
  const Eigen::MatrixXd m = gradient_matrix(inputs, target);
  std::vector<GradientVector> out;
  out.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i)
    out.push_back({m.row(static_cast<Eigen::Index>(i)).transpose(), target, inputs[i].id});
  return out;
}

// ---------------------------------------------------------------------------

AnalyticReferenceModel::AnalyticReferenceModel(const AnalyticReferenceSpec& spec) : spec_(spec) {
  if (spec.latent_dim <= 0) throw AdapterError("latent_dim must be positive");
  if (spec.pool_grid < 1 || spec.pool_grid > spec.input_size)
    throw AdapterError("pool_grid must lie in [1, input_size]");
  const int cells = spec.pool_grid * spec.pool_grid;
  if (spec.latent_dim > cells - 1)
    throw AdapterError("latent_dim must not exceed pool_grid^2 - 1");

  Rng rng(derive_seed(spec.seed, "analytic-encoder"));
  Eigen::MatrixXd basis(cells, spec.latent_dim);
  for (Eigen::Index j = 0; j < basis.cols(); ++j)
    for (Eigen::Index i = 0; i < basis.rows(); ++i) basis(i, j) = normal01(rng);
  basis.rowwise() -= basis.colwise().mean();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(basis);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(cells, spec.latent_dim);
  encoder_ = q.transpose();

  const double scale = 1.0 / std::sqrt(static_cast<double>(spec.latent_dim));
  for (std::size_t k = 0; k < heads_.size(); ++k) {
    Rng head_rng(derive_seed(spec.seed, "analytic-head", {k}));
    QuadraticHead h{Eigen::VectorXd(spec.latent_dim), Eigen::VectorXd(spec.latent_dim)};
    for (int i = 0; i < spec.latent_dim; ++i) h.w(i) = normal01(head_rng) * scale;
    for (int i = 0; i < spec.latent_dim; ++i) h.d(i) = 2.0 * uniform01(head_rng) - 1.0;
    heads_[k] = std::move(h);
  }
}

Eigen::VectorXd AnalyticReferenceModel::pool(const Image& input) const {
  const int g = spec_.pool_grid;
  const int n = static_cast<int>(input.rows());
  Eigen::VectorXd cells = Eigen::VectorXd::Zero(g * g);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(g * g);
  for (int r = 0; r < n; ++r) {
    const int cr = r * g / n;
    for (int c = 0; c < n; ++c) {
      const int cc = c * g / n;
      cells(cr * g + cc) += input(r, c);
      counts(cr * g + cc) += 1.0;
    }
  }
  return cells.cwiseQuotient(counts);
}

Eigen::VectorXd AnalyticReferenceModel::encode(const Image& input) const { return encoder_ * pool(input); }

QuadraticHead AnalyticReferenceModel::head(TargetClass target) const {
  switch (target) {
    case TargetClass::LV: return heads_[0];
    case TargetClass::RV: return heads_[1];
    case TargetClass::MYO: return heads_[2];
    case TargetClass::FOREGROUND_SUM:
      if (foreground_override_) return *foreground_override_;
      return {heads_[0].w + heads_[1].w + heads_[2].w, heads_[0].d + heads_[1].d + heads_[2].d};
  }
  throw AdapterError("unknown target class");
}

void AnalyticReferenceModel::set_head(TargetClass target, QuadraticHead head) {
  if (head.w.size() != spec_.latent_dim || head.d.size() != spec_.latent_dim)
    throw AdapterError("head dimension does not match latent_dim");
  switch (target) {
    case TargetClass::LV: heads_[0] = std::move(head); break;
    case TargetClass::RV: heads_[1] = std::move(head); break;
    case TargetClass::MYO: heads_[2] = std::move(head); break;
    case TargetClass::FOREGROUND_SUM: foreground_override_ = std::move(head); break;
  }
}

double AnalyticReferenceModel::head_value(const Eigen::VectorXd& latent, TargetClass target) const {
  const QuadraticHead h = head(target);
  return h.w.dot(latent) + 0.5 * spec_.epsilon * latent.dot(h.d.cwiseProduct(latent));
}

Eigen::VectorXd AnalyticReferenceModel::head_gradient(const Eigen::VectorXd& latent, TargetClass target) const {
  const QuadraticHead h = head(target);
  return h.w + spec_.epsilon * h.d.cwiseProduct(latent);
}

void AnalyticReferenceModel::check_input(const ModelInput& in) const {
  if (in.grid == nullptr) throw AdapterError("input " + in.id + " has no pixel grid");
  if (in.grid->rows() != spec_.input_size || in.grid->cols() != spec_.input_size)
    throw AdapterError("input " + in.id + " is " + std::to_string(in.grid->rows()) + "x" +
                       std::to_string(in.grid->cols()) + ", expected " + std::to_string(spec_.input_size));
}

Eigen::MatrixXd AnalyticReferenceModel::activation_matrix(std::span<const ModelInput> inputs) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(inputs.size()), spec_.latent_dim);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    check_input(inputs[i]);
    out.row(static_cast<Eigen::Index>(i)) = encode(*inputs[i].grid).transpose();
  }
  return out;
}

Eigen::MatrixXd AnalyticReferenceModel::gradient_matrix(std::span<const ModelInput> inputs,
                                                        TargetClass target) const {
  const QuadraticHead h = head(target);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(inputs.size()), spec_.latent_dim);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    check_input(inputs[i]);
    const Eigen::VectorXd a = encode(*inputs[i].grid);
    out.row(static_cast<Eigen::Index>(i)) = (h.w + spec_.epsilon * h.d.cwiseProduct(a)).transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------

FileBackedAdapter::FileBackedAdapter(const fs::path& dir) : dir_(dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw AdapterError("missing index.json in " + dir.string());
  nlohmann::json index;
  in >> index;
  ids_ = index.at("ids").get<std::vector<std::string>>();
  for (std::size_t i = 0; i < ids_.size(); ++i)
    if (!rows_.emplace(ids_[i], i).second) throw AdapterError("duplicate id " + ids_[i] + " in index.json");

  try {
    activations_ = npy::read_matrix(dir / "activations.npy");
  } catch (const npy::NpyError& e) {
    throw AdapterError(e.what());
  }
  if (static_cast<std::size_t>(activations_.rows()) != ids_.size())
    throw AdapterError("activations.npy has " + std::to_string(activations_.rows()) + " rows but index.json lists " +
                       std::to_string(ids_.size()) + " ids");
  if (activations_.cols() == 0) throw AdapterError("activations.npy has zero columns");
  if (!activations_.allFinite()) throw AdapterError("activations.npy contains non-finite values");

  for (auto t : {TargetClass::LV, TargetClass::RV, TargetClass::MYO, TargetClass::FOREGROUND_SUM}) {
    const fs::path file = dir / ("gradients_" + std::string(to_string(t)) + ".npy");
    if (!fs::exists(file)) continue;
    Eigen::MatrixXd g;
    try {
      g = npy::read_matrix(file);
    } catch (const npy::NpyError& e) {
      throw AdapterError(e.what());
    }
    if (g.rows() != activations_.rows() || g.cols() != activations_.cols())
      throw AdapterError(file.filename().string() + " shape " + std::to_string(g.rows()) + "x" +
                         std::to_string(g.cols()) + " does not match activations " +
                         std::to_string(activations_.rows()) + "x" + std::to_string(activations_.cols()));
    if (!g.allFinite()) throw AdapterError(file.filename().string() + " contains non-finite values");
    gradients_.emplace(t, std::move(g));
  }
}

std::size_t FileBackedAdapter::row_of(const std::string& id) const {
  const auto it = rows_.find(id);
  if (it == rows_.end()) throw AdapterError("no exported record for input id " + id + " in " + dir_.string());
  return it->second;
}

Eigen::MatrixXd FileBackedAdapter::activation_matrix(std::span<const ModelInput> inputs) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(inputs.size()), activations_.cols());
  for (std::size_t i = 0; i < inputs.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = activations_.row(static_cast<Eigen::Index>(row_of(inputs[i].id)));
  return out;
}

Eigen::MatrixXd FileBackedAdapter::gradient_matrix(std::span<const ModelInput> inputs, TargetClass target) const {
  const auto it = gradients_.find(target);
  if (it == gradients_.end())
    throw AdapterError("no gradients_" + std::string(to_string(target)) + ".npy in " + dir_.string());
  Eigen::MatrixXd out(static_cast<Eigen::Index>(inputs.size()), activations_.cols());
  for (std::size_t i = 0; i < inputs.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = it->second.row(static_cast<Eigen::Index>(row_of(inputs[i].id)));
  return out;
}

void write_file_backed_store(const fs::path& dir, std::span<const std::string> ids,
                             const Eigen::MatrixXd& activations,
                             const std::map<TargetClass, Eigen::MatrixXd>& gradients) {
  if (static_cast<std::size_t>(activations.rows()) != ids.size())
    throw AdapterError("activation rows do not match id count");
  for (const auto& [t, g] : gradients)
    if (g.rows() != activations.rows() || g.cols() != activations.cols())
      throw AdapterError("gradient shape mismatch for target " + std::string(to_string(t)));
  fs::create_directories(dir);
  npy::write_matrix(dir / "activations.npy", activations, npy::DType::F32);
  for (const auto& [t, g] : gradients)
    npy::write_matrix(dir / ("gradients_" + std::string(to_string(t)) + ".npy"), g, npy::DType::F32);
  std::ofstream(dir / "index.json") << nlohmann::json{{"ids", std::vector<std::string>(ids.begin(), ids.end())}}.dump(2)
                                    << "\n";
}

}  // namespace dtcav
