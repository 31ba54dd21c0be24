#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dtcav/model_adapter.hpp"
#include "dtcav/npy.hpp"
#include "dtcav/random.hpp"
#include "test_util.hpp"

using namespace dtcav;

namespace {

AnalyticReferenceSpec small_spec(double eps = 0.1) {
  AnalyticReferenceSpec s;
  s.input_size = 32;
  s.latent_dim = 20;
  s.pool_grid = 8;
  s.epsilon = eps;
  s.seed = 11;
  return s;
}

Image random_image(int n, Rng& rng) {
  Image img(n, n);
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = uniform01(rng);
  return img;
}

// Values exactly representable in float32.
Eigen::MatrixXd float_grid(int rows, int cols, double offset) {
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = offset + 0.25 * r - 0.125 * c;
  return m;
}

}  // namespace

TEST_CASE("zero image maps to the zero latent vector") {
  const AnalyticReferenceModel model(small_spec());
  const Image zero = Image::Zero(32, 32);
  CHECK(model.encode(zero).isZero(0.0));
}

TEST_CASE("encoder is linear and ignores global brightness") {
  const AnalyticReferenceModel model(small_spec());
  Rng rng(1);
  const Image a = random_image(32, rng), b = random_image(32, rng);
  const Eigen::VectorXd sum = model.encode(a + 2.0 * b);
  CHECK((sum - model.encode(a) - 2.0 * model.encode(b)).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((model.encode(a + Image::Constant(32, 32, 3.0)) - model.encode(a)).cwiseAbs().maxCoeff() < 1e-9);
  const Eigen::MatrixXd& w = model.encoder();
  CHECK((w * w.transpose() - Eigen::MatrixXd::Identity(20, 20)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("linear head gives the same gradient for every input") {
  const AnalyticReferenceModel model(small_spec(0.0));
  Rng rng(2);
  const Image a = random_image(32, rng), b = random_image(32, rng);
  const std::vector<ModelInput> inputs{{"a", &a}, {"b", &b}};
  for (auto t : {TargetClass::LV, TargetClass::RV, TargetClass::MYO, TargetClass::FOREGROUND_SUM}) {
    const Eigen::MatrixXd g = model.gradient_matrix(inputs, t);
    const Eigen::VectorXd w = model.head(t).w;
    CHECK((g.row(0).transpose() - w).cwiseAbs().maxCoeff() == 0.0);
    CHECK((g.row(1).transpose() - w).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("gradients match central finite differences") {
  const AnalyticReferenceModel model(small_spec());
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::VectorXd a(20);
    for (int i = 0; i < 20; ++i) a(i) = 2.0 * normal01(rng);
    for (auto t : {TargetClass::LV, TargetClass::FOREGROUND_SUM}) {
      const Eigen::VectorXd g = model.head_gradient(a, t);
      const double h = 1e-4;
      for (int i = 0; i < 20; ++i) {
        Eigen::VectorXd up = a, down = a;
        up(i) += h;
        down(i) -= h;
        const double fd = (model.head_value(up, t) - model.head_value(down, t)) / (2 * h);
        CHECK(std::abs(fd - g(i)) <= 1e-6 * std::max(1.0, std::abs(g(i))));
      }
    }
  }
}

TEST_CASE("foreground head is the sum of the structure heads") {
  const AnalyticReferenceModel model(small_spec());
  const auto lv = model.head(TargetClass::LV), rv = model.head(TargetClass::RV), myo = model.head(TargetClass::MYO);
  const auto fg = model.head(TargetClass::FOREGROUND_SUM);
  CHECK((fg.w - lv.w - rv.w - myo.w).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((fg.d - lv.d - rv.d - myo.d).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("batch splits and reordering preserve rows") {
  const AnalyticReferenceModel model(small_spec());
  Rng rng(4);
  std::vector<Image> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(random_image(32, rng));
  std::vector<ModelInput> all;
  for (std::size_t i = 0; i < imgs.size(); ++i) all.push_back({std::to_string(i), &imgs[i]});
  const Eigen::MatrixXd full = model.gradient_matrix(all, TargetClass::FOREGROUND_SUM);
  const std::span<const ModelInput> s(all);
  const Eigen::MatrixXd first = model.gradient_matrix(s.subspan(0, 2), TargetClass::FOREGROUND_SUM);
  const Eigen::MatrixXd rest = model.gradient_matrix(s.subspan(2), TargetClass::FOREGROUND_SUM);
  CHECK(first == full.topRows(2));
  CHECK(rest == full.bottomRows(3));
  const std::vector<ModelInput> reversed(all.rbegin(), all.rend());
  const Eigen::MatrixXd act = model.activation_matrix(all);
  const Eigen::MatrixXd act_rev = model.activation_matrix(reversed);
  for (int i = 0; i < 5; ++i) CHECK(act_rev.row(i) == act.row(4 - i));
}

TEST_CASE("wrong input size and oversized latent space are rejected") {
  const AnalyticReferenceModel model(small_spec());
  const Image small = Image::Zero(16, 16);
  const std::vector<ModelInput> in{{"x", &small}};
  CHECK_THROWS_AS(model.activation_matrix(in), AdapterError);
  auto spec = small_spec();
  spec.latent_dim = 64;
  CHECK_THROWS_AS(AnalyticReferenceModel{spec}, AdapterError);
}

TEST_CASE("file-backed store round-trips exactly") {
  const TempDir tmp;
  const std::vector<std::string> ids{"P1/0/ED", "P1/1/ES", "P2/0/ED"};
  const Eigen::MatrixXd act = float_grid(3, 4, 1.0);
  const Eigen::MatrixXd grad = float_grid(3, 4, -2.5);
  write_file_backed_store(tmp.path, ids, act, {{TargetClass::FOREGROUND_SUM, grad}});
  const FileBackedAdapter adapter(tmp.path);
  CHECK(adapter.latent_dim() == 4);
  CHECK(adapter.size() == 3);
  const std::vector<ModelInput> in{{"P2/0/ED", nullptr}, {"P1/0/ED", nullptr}};
  const Eigen::MatrixXd a = adapter.activation_matrix(in);
  CHECK(a.row(0) == act.row(2));
  CHECK(a.row(1) == act.row(0));
  const Eigen::MatrixXd g = adapter.gradient_matrix(in, TargetClass::FOREGROUND_SUM);
  CHECK(g.row(0) == grad.row(2));
  CHECK_THROWS_AS(adapter.gradient_matrix(in, TargetClass::LV), AdapterError);
  const std::vector<ModelInput> unknown{{"nope", nullptr}};
  CHECK_THROWS_AS(adapter.activation_matrix(unknown), AdapterError);
}

TEST_CASE("file-backed adapter rejects dimension mismatches") {
  const TempDir tmp;
  const std::vector<std::string> ids{"a", "b"};
  write_file_backed_store(tmp.path, ids, float_grid(2, 4, 0.0), {{TargetClass::LV, float_grid(2, 4, 1.0)}});
  npy::write_matrix(tmp.path / "gradients_lv.npy", float_grid(2, 3, 1.0), npy::DType::F32);
  CHECK_THROWS_AS(FileBackedAdapter{tmp.path}, AdapterError);
  CHECK_THROWS_AS(
      write_file_backed_store(tmp.path, ids, float_grid(2, 4, 0.0), {{TargetClass::LV, float_grid(3, 4, 1.0)}}),
      AdapterError);
}
