#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <functional>
#include <optional>

#include "fixtures.hpp"
#include "knobs/container.hpp"
#include "knobs/dataset.hpp"
#include "knobs/model_io.hpp"
#include "pipeline_fixture.hpp"

using namespace knobs;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("knobs_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

Container sample_container() {
  Rng rng(1);
  Container c;
  c.tensors.push_back(tensor_from("w", test::random_matrix(rng, 3, 4)));
  c.tensors.push_back(tensor_from("b", test::random_row(rng, 5)));
  c.metadata = {{"model", "test"}, {"n", 3}};
  return c;
}

template <class M>
bool bitwise_equal(const M& a, const M& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(double)) == 0;
}

std::optional<ErrorCode> code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

}  // namespace

TEST(Container, RoundTripIsExact) {
  const auto c = sample_container();
  const auto bytes = serialize(c);
  const auto back = deserialize(bytes);
  ASSERT_EQ(back.tensors.size(), 2u);
  EXPECT_TRUE(bitwise_equal(to_matrix(back.get("w")), to_matrix(c.get("w"))));
  EXPECT_TRUE(bitwise_equal(to_row_vector(back.get("b")), to_row_vector(c.get("b"))));
  EXPECT_EQ(back.metadata, c.metadata);
  EXPECT_EQ(serialize(back), bytes);
}

TEST(Container, SpecialValuesSurvive) {
  Container c;
  RowVector v(4);
  v << 0.0, -0.0, 1e-308, std::numeric_limits<double>::max();
  c.tensors.push_back(tensor_from("v", v));
  EXPECT_TRUE(bitwise_equal(to_row_vector(deserialize(serialize(c)).get("v")), v));
}

TEST(Container, BadMagicRejected) {
  auto bytes = serialize(sample_container());
  bytes[0] = 'X';
  EXPECT_EQ(code_of([&] { deserialize(bytes); }), ErrorCode::format);
}

TEST(Container, VersionMismatchRejected) {
  auto bytes = serialize(sample_container());
  bytes[4] = 2;
  EXPECT_EQ(code_of([&] { deserialize(bytes); }), ErrorCode::format);
}

TEST(Container, EveryTruncationRejected) {
  const auto bytes = serialize(sample_container());
  for (std::size_t len = 0; len < bytes.size(); ++len)
    EXPECT_EQ(code_of([&] { deserialize(std::string_view(bytes).substr(0, len)); }), ErrorCode::format)
        << len;
}

TEST(Container, TrailingBytesRejected) {
  auto bytes = serialize(sample_container());
  bytes.push_back('\0');
  EXPECT_EQ(code_of([&] { deserialize(bytes); }), ErrorCode::format);
}

TEST(Container, MissingTensorIsFormatError) {
  EXPECT_EQ(code_of([] { sample_container().get("nope"); }), ErrorCode::format);
}

TEST(Container, MissingFileIsMissingInput) {
  EXPECT_EQ(code_of([] { load_container("/nonexistent/model.knob"); }), ErrorCode::missing_input);
}

TEST(ModelIo, ElsaRoundTrip) {
  TempDir dir;
  Rng rng(2);
  RowMatrix a = test::random_matrix(rng, 9, 3);
  normalize_rows(a);
  for (auto pooling : {ElsaPooling::sum, ElsaPooling::mean}) {
    const Cfae cfae = ElsaModel(a, pooling);
    save_cfae(dir.path() / "cfae.knob", cfae);
    const Cfae back = load_cfae(dir.path() / "cfae.knob");
    const auto& m = std::get<ElsaModel>(back);
    EXPECT_TRUE(bitwise_equal(m.embeddings(), a));
    EXPECT_EQ(m.pooling(), pooling);
    const auto sidecar = read_json(dir.path() / "cfae.json");
    EXPECT_EQ(sidecar.at("model"), "elsa");
    EXPECT_EQ(sidecar.at("pooling"), to_string(pooling));
  }
}

TEST(ModelIo, MultVaeRoundTrip) {
  TempDir dir;
  Rng rng(3);
  const Cfae cfae = MultVaeModel(test::random_vae_params(rng, 7, 2), 0.2, 0.5);
  save_cfae(dir.path() / "vae.knob", cfae);
  const Cfae back = load_cfae(dir.path() / "vae.knob");
  const auto& a = std::get<MultVaeModel>(cfae).params();
  const auto& b = std::get<MultVaeModel>(back).params();
  EXPECT_TRUE(bitwise_equal(a.enc_w1, b.enc_w1));
  EXPECT_TRUE(bitwise_equal(a.lv_b, b.lv_b));
  EXPECT_TRUE(bitwise_equal(a.out_w, b.out_w));
  const std::vector<index_t> h{1, 4};
  EXPECT_EQ(cfae_encode(cfae, h), cfae_encode(back, h));
}

TEST(ModelIo, SaeRoundTrip) {
  TempDir dir;
  const auto& p = test::small_pipeline();
  save_sae(dir.path() / "sae.knob", p.sae, "cfae.knob");
  const SaeModel back = load_sae(dir.path() / "sae.knob");
  EXPECT_TRUE(bitwise_equal(back.params().enc_w, p.sae.params().enc_w));
  EXPECT_TRUE(bitwise_equal(back.standardizer().scale, p.sae.standardizer().scale));
  EXPECT_EQ(back.k(), p.sae.k());
  EXPECT_EQ(back.variant(), p.sae.variant());
  const std::vector<index_t> h{0, 1, 2};
  const Vector z = cfae_encode(p.cfae, h);
  EXPECT_EQ(back.encode(z).entries, p.sae.encode(z).entries);
  EXPECT_EQ(read_json(dir.path() / "sae.json").at("parent_model"), "cfae.knob");
}

TEST(ModelIo, SaeFileIsNotACfae) {
  TempDir dir;
  const auto& p = test::small_pipeline();
  save_sae(dir.path() / "sae.knob", p.sae, "x");
  EXPECT_EQ(code_of([&] { load_cfae(dir.path() / "sae.knob"); }), ErrorCode::format);
}

TEST(ModelIo, SavingTwiceIsByteIdentical) {
  TempDir dir;
  const auto& p = test::small_pipeline();
  save_cfae(dir.path() / "a.knob", p.cfae);
  save_cfae(dir.path() / "b.knob", p.cfae);
  EXPECT_EQ(read_file(dir.path() / "a.knob"), read_file(dir.path() / "b.knob"));
}

TEST(DatasetIo, RoundTripKeepsIndexing) {
  TempDir dir;
  const auto& p = test::small_pipeline();
  Dataset d{p.corpus.x, p.corpus.tags, p.corpus.titles, p.split, std::nullopt};
  write_dataset(dir.path(), d, truth_to_json(p.corpus));
  const auto back = load_dataset(dir.path());
  EXPECT_EQ(back.x.rows, d.x.rows);
  EXPECT_EQ(back.x.items.ids(), d.x.items.ids());
  EXPECT_EQ(back.x.users.ids(), d.x.users.ids());
  EXPECT_EQ(back.titles, d.titles);
  EXPECT_EQ(back.tags.tags, d.tags.tags);
  EXPECT_EQ(back.split.test, d.split.test);
  ASSERT_TRUE(back.truth);
  EXPECT_EQ(back.truth->item_concepts, p.corpus.item_concepts);
  const auto h1 = dataset_hash(dir.path());
  write_dataset(dir.path(), back, truth_to_json(p.corpus));
  EXPECT_EQ(dataset_hash(dir.path()), h1);
}

TEST(DatasetIo, MissingFileIsMissingInput) {
  TempDir dir;
  EXPECT_EQ(code_of([&] { load_dataset(dir.path()); }), ErrorCode::missing_input);
}

TEST(JsonUtil, SignificantDigitRounding) {
  EXPECT_EQ(round_sig9(0.1234567891234), 0.123456789);
  EXPECT_EQ(round_sig9(0.0), 0.0);
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
}
