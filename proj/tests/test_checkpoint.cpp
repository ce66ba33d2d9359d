#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "kpn/kpn.hpp"

using namespace kpn;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& stem) {
  std::random_device rd;
  return fs::temp_directory_path() / (stem + "_" + std::to_string(rd()) + ".kpnc");
}

DataError::Kind parse_error(const std::string& bytes) {
  try {
    parse_checkpoint(bytes);
  } catch (const DataError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no DataError";
  return DataError::Kind::io;
}

Dataset noise_images(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Dataset d{1, 28, 28, std::vector<float>(n * 784), std::vector<int>(n, 0), 10};
  for (auto& v : d.images) v = u(rng);
  return d;
}

TEST(Checkpoint, HandEncodedLayout) {
  Checkpoint c;
  c.metadata = {{"k", 1}};
  c.tensors.push_back({"a", {2}, DType::f32, {1.5, -2.0}});
  const auto bytes = serialize_checkpoint(c);
  const std::string meta = R"({"k":1})";
  ASSERT_EQ(bytes.size(), 4 + 4 + 4 + meta.size() + 4 + 4 + 1 + 1 + 4 + 8 + 8);
  EXPECT_EQ(bytes.substr(0, 4), "KPNC");
  EXPECT_EQ(bytes.substr(12, meta.size()), meta);
  const std::size_t at = 12 + meta.size() + 4 + 4 + 1;
  EXPECT_EQ(static_cast<std::uint8_t>(bytes[at]), 0u);  // f32
  float v;
  std::memcpy(&v, bytes.data() + at + 1 + 4 + 8, 4);
  EXPECT_EQ(v, 1.5f);
}

TEST(Checkpoint, RoundTripBothDtypes) {
  Checkpoint c;
  c.metadata = {{"kind", "test"}, {"nested", {{"x", 2.5}}}};
  c.tensors.push_back({"f", {2, 3}, DType::f32, {0.1f, 0.2f, 0.3f, -1, 2, 3}});
  c.tensors.push_back({"d", {1}, DType::f64, {0.1}});
  c.tensors.push_back({"scalar", {}, DType::f64, {7.0}});
  const auto path = temp_file("rt");
  save_checkpoint(path, c);
  const auto back = load_checkpoint(path);
  fs::remove(path);
  EXPECT_EQ(back.metadata, c.metadata);
  ASSERT_EQ(back.tensors.size(), 3u);
  EXPECT_EQ(back.find("f")->values, c.tensors[0].values);
  EXPECT_EQ(back.find("d")->values[0], 0.1);
  EXPECT_EQ(back.find("scalar")->shape, Shape{});
  EXPECT_EQ(back.find("missing"), nullptr);
}

TEST(Checkpoint, Errors) {
  Checkpoint c;
  c.tensors.push_back({"a", {2}, DType::f64, {1, 2}});
  const auto good = serialize_checkpoint(c);
  EXPECT_EQ(parse_error("KP"), DataError::Kind::truncated);
  EXPECT_EQ(parse_error("XXXX" + good.substr(4)), DataError::Kind::bad_magic);
  EXPECT_EQ(parse_error(good.substr(0, good.size() - 3)), DataError::Kind::truncated);
  EXPECT_EQ(parse_error(good + "x"), DataError::Kind::invalid);
  auto bad_version = good;
  bad_version[4] = 9;
  EXPECT_EQ(parse_error(bad_version), DataError::Kind::invalid);
  auto bad_dtype = good;
  bad_dtype[4 + 4 + 4 + 2 + 4 + 4 + 1] = 5;
  EXPECT_EQ(parse_error(bad_dtype), DataError::Kind::invalid);
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt.kpnc"), DataError);
  Checkpoint broken;
  broken.tensors.push_back({"a", {3}, DType::f32, {1}});
  EXPECT_THROW(serialize_checkpoint(broken), ShapeError);
}

TEST(Checkpoint, NetworkRoundTripIsBitExact) {
  Network<float> net(preset("26--"), "student", 4);
  // Move running statistics off their defaults.
  net.forward(Tensor<float>({4, 1, 28, 28}, 0.3f), Mode::train);
  const auto c = network_checkpoint(net, {{"note", "x"}});
  const auto path = temp_file("net");
  save_checkpoint(path, c);
  auto back = network_from_checkpoint<float>(load_checkpoint(path));
  fs::remove(path);
  EXPECT_EQ(parameter_hash(back), parameter_hash(net));
  EXPECT_EQ(back.architecture(), net.architecture());
  const auto data = noise_images(20, 1);
  EXPECT_EQ(predict_logits(back, data, 7), predict_logits(net, data, 7));
}

TEST(Checkpoint, RestoreRejectsMissingAndMisshapen) {
  Network<float> net(preset("26--"), "student", 4);
  auto c = network_checkpoint(net);
  c.tensors.erase(c.tensors.begin());
  EXPECT_THROW(network_from_checkpoint<float>(c), DataError);
  auto d = network_checkpoint(net);
  d.tensors[0].shape = {1};
  d.tensors[0].values = {0};
  EXPECT_THROW(network_from_checkpoint<float>(d), DataError);
  auto e = network_checkpoint(net);
  e.metadata["kind"] = "kpn";
  EXPECT_THROW(network_from_checkpoint<float>(e), DataError);
}

TEST(Checkpoint, ExportDropsProjectionAndKeepsLogits) {
  Network<float> teacher(preset("teacher-cnn"), "teacher", 1);
  TrainConfig cfg;
  auto k = make_kpn_instance(teacher, preset("26--"), Route{2, 2}, cfg, 5);
  k.student.forward(Tensor<float>({4, 1, 28, 28}, 0.7f), Mode::train);
  const auto full = kpn_checkpoint(k.student, k.projection, 2, 2);
  EXPECT_NE(full.find("projection.weight"), nullptr);
  EXPECT_EQ(full.metadata["route"]["injection"], 2);
  const auto exported = strip_to_student(full);
  for (const auto& t : exported.tensors) {
    EXPECT_EQ(t.name.rfind("net.", 0), 0u) << t.name;
    EXPECT_EQ(t.name.find("projection"), std::string::npos);
  }
  EXPECT_FALSE(exported.metadata.contains("route"));
  auto student = network_from_checkpoint<float>(exported);
  const auto data = noise_images(50, 2);
  EXPECT_EQ(predict_logits(student, data, 16), predict_logits(k.student, data, 16));
  EXPECT_THROW(strip_to_student(exported), DataError);
}

}  // namespace
