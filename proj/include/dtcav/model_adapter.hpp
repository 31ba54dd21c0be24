#ifndef DTCAV_MODEL_ADAPTER_HPP
#define DTCAV_MODEL_ADAPTER_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dtcav/types.hpp"

namespace dtcav {

/// Scalarization target for the gradient of a segmentation output.
enum class TargetClass { LV, RV, MYO, FOREGROUND_SUM };

std::string_view to_string(TargetClass t);
std::optional<TargetClass> parse_target(std::string_view s);

struct LatentVector {
  Eigen::VectorXd values;
  std::string source;
};

struct GradientVector {
  Eigen::VectorXd values;
  TargetClass target_class = TargetClass::FOREGROUND_SUM;
  std::string source;
};

/// One network input: an id (for file-backed lookups) and its pixel grid.
struct ModelInput {
  std::string id;
  const Image* grid = nullptr;
};

class AdapterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Access to middle-layer activations f_l(x) and gradients of the scalarized
/// output with respect to them.
class ModelAdapter {
 public:
  virtual ~ModelAdapter() = default;

  virtual int latent_dim() const = 0;

  /// Rows follow input order.
  virtual Eigen::MatrixXd activation_matrix(std::span<const ModelInput> inputs) const = 0;
  virtual Eigen::MatrixXd gradient_matrix(std::span<const ModelInput> inputs, TargetClass target) const = 0;

  std::vector<LatentVector> activations(std::span<const ModelInput> inputs) const;
  std::vector<GradientVector> gradients(std::span<const ModelInput> inputs, TargetClass target) const;
};

/// Quadratic head h(a) = w·a + (eps/2)·aᵀ diag(d) a on top of a linear encoder.
struct QuadraticHead {
  Eigen::VectorXd w;
  Eigen::VectorXd d;
};

struct AnalyticReferenceSpec {
  int input_size = 348;
  int latent_dim = 64;
  int pool_grid = 16;
  double epsilon = 0.1;
  std::uint64_t seed = 0;
};

/// Deterministic stand-in for a segmentation network.
///
/// Encoder: average-pool the input onto a pool_grid × pool_grid lattice, remove
/// the lattice mean, and project with a random matrix whose rows are
/// orthonormal. The encoder is linear, blind to global brightness, and maps the
/// zero image to the zero vector.
///
/// Heads: one seeded QuadraticHead per structure (LV, RV, MYO). FOREGROUND_SUM
/// is the sum of the three structure heads.
class AnalyticReferenceModel final : public ModelAdapter {
 public:
  explicit AnalyticReferenceModel(const AnalyticReferenceSpec& spec);

  int latent_dim() const override { return spec_.latent_dim; }
  const AnalyticReferenceSpec& spec() const { return spec_; }

  /// latent_dim × pool_grid² projection.
  const Eigen::MatrixXd& encoder() const { return encoder_; }

  /// Pooled lattice values of one input, flattened row-major.
  Eigen::VectorXd pool(const Image& input) const;
  Eigen::VectorXd encode(const Image& input) const;

  QuadraticHead head(TargetClass target) const;
  void set_head(TargetClass target, QuadraticHead head);

  /// h(a) for the given target.
  double head_value(const Eigen::VectorXd& latent, TargetClass target) const;
  /// ∇h(a) = w + eps·diag(d)·a.
  Eigen::VectorXd head_gradient(const Eigen::VectorXd& latent, TargetClass target) const;

  Eigen::MatrixXd activation_matrix(std::span<const ModelInput> inputs) const override;
  Eigen::MatrixXd gradient_matrix(std::span<const ModelInput> inputs, TargetClass target) const override;

 private:
  void check_input(const ModelInput& in) const;

  AnalyticReferenceSpec spec_;
  Eigen::MatrixXd encoder_;
  std::array<QuadraticHead, 3> heads_;  // LV, RV, MYO
  std::optional<QuadraticHead> foreground_override_;
};

/// Reads exported activations/gradients keyed by example id.
///
/// Directory layout: activations.npy (n×d), gradients_<target>.npy (n×d),
/// index.json {"ids": [...]} mapping row i to ids[i].
class FileBackedAdapter final : public ModelAdapter {
 public:
  explicit FileBackedAdapter(const std::filesystem::path& dir);

  int latent_dim() const override { return static_cast<int>(activations_.cols()); }
  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }

  Eigen::MatrixXd activation_matrix(std::span<const ModelInput> inputs) const override;
  Eigen::MatrixXd gradient_matrix(std::span<const ModelInput> inputs, TargetClass target) const override;

 private:
  std::size_t row_of(const std::string& id) const;

  std::filesystem::path dir_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> rows_;
  Eigen::MatrixXd activations_;
  std::map<TargetClass, Eigen::MatrixXd> gradients_;
};

/// Writes the file-backed format. Gradient matrices must match the activation shape.
void write_file_backed_store(const std::filesystem::path& dir, std::span<const std::string> ids,
                             const Eigen::MatrixXd& activations,
                             const std::map<TargetClass, Eigen::MatrixXd>& gradients);

}  // namespace dtcav

#endif  // DTCAV_MODEL_ADAPTER_HPP
