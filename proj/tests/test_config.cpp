#include "doctest.h"
#include "multisiam/config.h"

using namespace msiam;

TEST_CASE("empty text gives the defaults") {
  const TrainConfig c = parse_config("");
  const TrainConfig d;
  CHECK(c.to_text() == d.to_text());
  CHECK(c.iou_threshold == 0.5);
  CHECK(c.k == 3);
  CHECK(c.lambda == 0.5);
  CHECK(c.tau_base == 0.996);
  CHECK(c.temperature == 0.2);
  CHECK(c.min_scale == 0.08);
  CHECK(c.weight_decay == 1e-5);
  CHECK(c.lr_base == 1.0);
  CHECK(c.steps == 300);
  CHECK(c.batch_size == 8);
  CHECK(c.alignment == AlignMode::kOffset);
  CHECK(c.self_attention);
  CHECK_FALSE(c.residual);
  CHECK(c.symmetrize);
  CHECK(c.head_norm);
  CHECK(c.predictor_lr_scale == 100.0);
}

TEST_CASE("single override leaves the rest at defaults") {
  const TrainConfig c = parse_config("# comment\nlambda=0.7\n\n");
  CHECK(c.lambda == 0.7);
  TrainConfig d;
  d.lambda = 0.7;
  CHECK(c.to_text() == d.to_text());
}

TEST_CASE("enum errors list the valid values") {
  try {
    parse_config("alignment=banana");
    FAIL("expected InvalidArgument");
  } catch (const InvalidArgument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("alignment") != std::string::npos);
    for (const char* v : {"roi", "offset", "none"})
      CHECK(msg.find(v) != std::string::npos);
  }
}

TEST_CASE("bad keys and values name the key") {
  auto message = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const InvalidArgument& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("colour=red").find("colour") != std::string::npos);
  CHECK(message("lambda=1.5").find("lambda") != std::string::npos);
  CHECK(message("steps=0").find("steps") != std::string::npos);
  CHECK(message("batch_size=abc").find("batch_size") != std::string::npos);
  CHECK(message("K=2.5").find("K") != std::string::npos);
  CHECK(message("symmetrize=maybe").find("symmetrize") != std::string::npos);
  CHECK(message("no equals sign") != "");
}

TEST_CASE("overrides apply after the file") {
  const TrainConfig c =
      parse_config("K=4\nloss_mode=moco\n", {{"K", "5"}, {"dense", "true"}});
  CHECK(c.k == 5);
  CHECK(c.dense);
  CHECK(c.loss_mode == LossMode::kMoco);
}

TEST_CASE("residual follows the alignment unless set") {
  CHECK(parse_config("alignment=roi").residual);
  CHECK_FALSE(parse_config("alignment=offset").residual);
  CHECK_FALSE(parse_config("alignment=roi\nresidual=false").residual);
  CHECK(parse_config("alignment=none\nresidual=true").residual);
}

TEST_CASE("to_text round trips") {
  TrainConfig c;
  c.lambda = 0.25;
  c.loss_mode = LossMode::kWoKmeans;
  c.alignment = AlignMode::kNone;
  c.optimizer = OptimizerKind::kLars;
  c.kmeans_metric = KMeansMetric::kEuclidean;
  c.seed = 123456789012345ULL;
  c.tau_base = 0.1 + 0.2; // not exactly representable in short decimal
  const TrainConfig back = parse_config(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK(back.tau_base == c.tau_base);
  for (const auto& key : config_keys())
    CHECK(c.to_text().find(key + "=") != std::string::npos);
}
