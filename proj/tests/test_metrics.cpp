#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "vitbd/data.hpp"
#include "vitbd/metrics.hpp"
#include "vitbd/model.hpp"
#include "vitbd/rng.hpp"

using namespace vitbd;

namespace {

ModelSpec tiny_spec(std::size_t classes = 3) {
  ModelSpec sp;
  sp.image_size = 8;
  sp.channels = 1;
  sp.patch_size = 4;
  sp.embed_dim = 8;
  sp.num_heads = 2;
  sp.num_blocks = 2;
  sp.mlp_ratio = 2;
  sp.num_classes = classes;
  return sp;
}

LabeledDataset image_pool(std::size_t n, std::uint64_t seed) {
  SyntheticConfig cfg;
  cfg.family = "texture";
  cfg.num_classes = 3;
  cfg.image_size = 8;
  cfg.channels = 1;
  return gen_synthetic(cfg, n, seed);
}

// Picks pool rows so that exactly `hits` of `total` samples are predicted as
// the returned target class; predictions are fixed, labels are ours to set.
struct CraftedSet {
  LabeledDataset data;
  int target = 0;
  std::vector<int> preds;
};

CraftedSet craft(const Checkpoint& model, std::size_t hits, std::size_t total,
                 std::uint64_t seed) {
  LabeledDataset pool = image_pool(64, seed);
  std::vector<int> preds = predict(model, pool.images);
  CraftedSet out;
  out.target = preds[0];
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < preds.size() && idx.size() < hits; ++i)
    if (preds[i] == out.target) idx.push_back(i);
  for (std::size_t i = 0; i < preds.size() && idx.size() < total; ++i)
    if (preds[i] != out.target) idx.push_back(i);
  REQUIRE(idx.size() == total);
  out.data = pool.subset(idx);
  std::fill(out.data.labels.begin(), out.data.labels.end(), out.target);
  out.data.source_labels.clear();
  for (std::size_t i : idx) out.preds.push_back(preds[i]);
  return out;
}

}  // namespace

TEST_CASE("cda counts argmax matches exactly") {
  Checkpoint m = Checkpoint::init(tiny_spec(), 3);
  LabeledDataset pool = image_pool(4, 4);
  std::vector<int> preds = predict(m, pool.images);

  pool.labels = preds;
  CHECK(cda(m, pool) == 1.0);

  pool.labels[3] = (preds[3] + 1) % 3;
  CHECK(cda(m, pool) == 0.75);

  LabeledDataset empty;
  empty.images = Tensor::zeros({0, 1, 8, 8});
  CHECK_THROWS_AS(cda(m, empty), ValueError);
  CHECK_THROWS_AS(cda(Checkpoint{}, pool), ValueError);
}

TEST_CASE("asr enumerates target predictions with optional exclusion") {
  Checkpoint m = Checkpoint::init(tiny_spec(), 5);
  CraftedSet c = craft(m, 2, 5, 8);

  CHECK(asr(m, c.data, c.target) == 0.4);

  // Give one miss a source label equal to the target: it drops out and the
  // two hits remain among four kept samples.
  c.data.source_labels.assign(5, (c.target + 1) % 3);
  for (std::size_t i = 0; i < 5; ++i) {
    if (c.preds[i] != c.target) {
      c.data.source_labels[i] = c.target;
      break;
    }
  }
  CHECK(asr(m, c.data, c.target, true) == 0.5);
  CHECK(asr(m, c.data, c.target, false) == 0.4);

  // Exclusion with every source equal to the target empties the set.
  std::fill(c.data.source_labels.begin(), c.data.source_labels.end(),
            c.target);
  CHECK_THROWS_AS(asr(m, c.data, c.target, true), ValueError);

  c.data.source_labels.clear();
  CHECK_THROWS_AS(asr(m, c.data, c.target, true), ValueError);
  CHECK_THROWS_AS(asr(m, c.data, -1), ValueError);
  CHECK_THROWS_AS(asr(m, c.data, 3), ValueError);

  CraftedSet all = craft(m, 3, 3, 9);
  CHECK(asr(m, all.data, all.target) == 1.0);

  LabeledDataset empty;
  empty.images = Tensor::zeros({0, 1, 8, 8});
  CHECK_THROWS_AS(asr(m, empty, 0), ValueError);
}

TEST_CASE("cda and asr ignore evaluation order") {
  Checkpoint m = Checkpoint::init(tiny_spec(), 6);
  LabeledDataset pool = image_pool(24, 10);
  const double base_cda = cda(m, pool);
  const double base_asr = asr(m, pool, 1);

  std::vector<std::size_t> perm(pool.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng(99).shuffle(perm.data(), perm.size());
  LabeledDataset shuffled = pool.subset(perm);
  CHECK(cda(m, shuffled) == base_cda);
  CHECK(asr(m, shuffled, 1) == base_asr);
}

TEST_CASE("disjoint unions average by size") {
  Checkpoint m = Checkpoint::init(tiny_spec(), 7);
  LabeledDataset pool = image_pool(16, 11);
  std::vector<std::size_t> first(6), rest(10);
  std::iota(first.begin(), first.end(), 0);
  std::iota(rest.begin(), rest.end(), 6);
  LabeledDataset s1 = pool.subset(first);
  LabeledDataset s2 = pool.subset(rest);

  CHECK(cda(m, pool) * 16.0 == cda(m, s1) * 6.0 + cda(m, s2) * 10.0);
  CHECK(asr(m, pool, 2) * 16.0 == asr(m, s1, 2) * 6.0 + asr(m, s2, 2) * 10.0);
}

TEST_CASE("cost estimates follow the attack family") {
  Checkpoint m = Checkpoint::init(tiny_spec(10), 12);
  const std::size_t total = m.total_scalars();

  CostEstimate bad = cost_estimate(AttackKind::badnets, m);
  CHECK(bad.tuned_params == total);
  CHECK(bad.images_reversed == 0);
  CHECK(bad.label_count == 10);

  CostEstimate troj = cost_estimate(AttackKind::trojaning, m);
  CHECK(troj.tuned_params == total);
  CHECK(troj.images_reversed == 11);

  CostEstimate db = cost_estimate(AttackKind::dbia, m, 1000);
  CHECK(db.tuned_params == 1000);
  CHECK(db.total_params == total);
  CHECK(db.images_reversed == 1);
  CHECK(db.tuned_params <= db.total_params);

  CHECK_THROWS_AS(cost_estimate(AttackKind::dbia, m), ValueError);
  CHECK_THROWS_AS(cost_estimate(AttackKind::dbia, m, total + 1), ValueError);
  CHECK_THROWS_AS(cost_estimate(AttackKind::badnets, Checkpoint{}), ValueError);
}

TEST_CASE("csv reports round trip bit-exactly") {
  AttackReport a;
  a.label = "vit-tiny";
  a.cda_before = 0.1 + 0.2;
  a.cda_after = 1.0 / 3.0;
  a.asr_surd = std::nextafter(1.0, 0.0);
  a.asr_reld = 0.7;
  a.ar = std::numeric_limits<double>::infinity();
  a.tpr = 0.059999999999999998;
  a.inject_seconds = 123.45678901234567;
  a.config_hash = "deadbeef01234567";

  AttackReport b;
  b.label = "swin-tiny";
  b.ar = 4.25;
  b.config_hash = "00ff00ff00ff00ff";

  const std::string csv = render_report({a, b}, ReportFormat::csv);
  std::vector<AttackReport> back = parse_report_csv(csv);
  REQUIRE(back.size() == 2);
  CHECK(back[0] == a);
  CHECK(back[1] == b);

  CHECK(parse_report_csv(render_report({}, ReportFormat::csv)).empty());

  CHECK_THROWS_AS(parse_report_csv("nonsense\n1,2,3"), FormatError);
  const std::string header = csv.substr(0, csv.find('\n') + 1);
  CHECK_THROWS_AS(parse_report_csv(header + "only,0.5,0.5\n"), FormatError);
  CHECK_THROWS_AS(parse_report_csv(header + "x,a,0,0,0,0,0,0,h\n"),
                  FormatError);

  AttackReport bad;
  bad.label = "commas,break,rows";
  CHECK_THROWS_AS(render_report({bad}, ReportFormat::csv), ValueError);
}

TEST_CASE("text tables keep input order and a header-only empty form") {
  AttackReport a;
  a.label = "first-model";
  a.cda_before = 0.9;
  a.ar = std::numeric_limits<double>::infinity();
  AttackReport b;
  b.label = "second-model";
  b.cda_before = 0.8;

  const std::string text = render_report({a, b}, ReportFormat::text);
  CHECK(text.find("cda_before") != std::string::npos);
  CHECK(text.find("first-model") < text.find("second-model"));
  CHECK(text.find("inf") != std::string::npos);

  const std::string empty = render_report({}, ReportFormat::text);
  CHECK(empty.find('\n') == empty.size() - 1);  // single header line
}

TEST_CASE("json reports carry every field and an inf sentinel") {
  AttackReport a;
  a.label = "vit-tiny";
  a.cda_before = 0.5;
  a.ar = std::numeric_limits<double>::infinity();
  a.config_hash = "cafe";
  AttackReport b;
  b.label = "plain";
  b.ar = 2.5;

  nlohmann::json arr =
      nlohmann::json::parse(render_report({a, b}, ReportFormat::json));
  REQUIRE(arr.size() == 2);
  CHECK(arr[0].at("label") == "vit-tiny");
  CHECK(arr[0].at("cda_before").get<double>() == 0.5);
  CHECK(arr[0].at("ar").is_string());
  CHECK(arr[0].at("ar") == "inf");
  CHECK(arr[0].at("config_hash") == "cafe");
  CHECK(arr[1].at("ar").get<double>() == 2.5);
}
