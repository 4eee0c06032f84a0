// Copyright 2026 The Modscope Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <filesystem>
#include <map>
#include <string>

#include <gtest/gtest.h>

#include "json.hpp"
#include "modscope/checkpoint.h"
#include "modscope/errors.h"
#include "modscope/model.h"
#include "modscope/planted.h"
#include "modscope/predictivity.h"
#include "modscope/report.h"

namespace modscope {
namespace {

TEST(ReportTest, Fnv1aReferenceVectors) {
  EXPECT_EQ(HexDigest(Fnv1a64("")), "cbf29ce484222325");
  EXPECT_EQ(HexDigest(Fnv1a64("a")), "af63dc4c8601ec8c");
  EXPECT_EQ(HexDigest(Fnv1a64("foobar")), "85944171f73967e8");
}

TEST(ReportTest, ManifestRecordsDigestsWithoutTimestamps) {
  const auto dir = std::filesystem::temp_directory_path() / "modscope_report_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  WriteFileBytes(dir / "in.txt", "a");
  {
    ReportWriter w(dir, "demo", {{"x", 1}});
    w.AddInput(dir / "in.txt");
    w.Write("out.csv", "foobar");
    w.Finish();
  }
  const auto m = nlohmann::json::parse(ReadFileBytes(dir / "manifest.json"));
  EXPECT_EQ(m["command"], "demo");
  EXPECT_EQ(m["version"], std::string(kToolVersion));
  EXPECT_EQ(m["inputs"][0]["fnv1a64"], "af63dc4c8601ec8c");
  EXPECT_EQ(m["outputs"][0]["path"], "out.csv");
  EXPECT_EQ(m["outputs"][0]["fnv1a64"], "85944171f73967e8");
  EXPECT_EQ(m["config_hash"].get<std::string>().size(), 16u);
  EXPECT_FALSE(m.contains("timestamp"));
  std::filesystem::remove_all(dir);
}

TEST(ReportTest, ErrorsMapToExitCodes) {
  EXPECT_EQ(ExitCodeFor(ConfigError("x")), 2);
  EXPECT_EQ(ExitCodeFor(ValidationError("x")), 2);
  EXPECT_EQ(ExitCodeFor(ComputeError("x")), 3);
  EXPECT_EQ(ExitCodeFor(IoError("x")), 4);
  EXPECT_EQ(ExitCodeFor(ParseError("x", 7)), 4);
  const auto report = ErrorReport(ParseError("bad", 7));
  EXPECT_EQ(report["error"]["kind"], "parse error");
  EXPECT_EQ(report["error"]["position"], 7);
  EXPECT_EQ(report["error"]["exit_code"], 4);
}

TEST(PlantedTest, SuiteAndTruthAgree) {
  PlantedSpec spec;
  spec.d_ff = 64;
  spec.num_experts = 8;
  const int experts[] = {2, 5};
  PlantConcentrated(spec, "task", FunctionCategory::kTask, 4, 2, experts);
  EXPECT_NO_THROW(spec.Validate());
  const PlantedSuite planted = SynthPlantedSuite(spec, 1);
  EXPECT_EQ(planted.suite.sub_functions.size(), 4u);
  EXPECT_EQ(planted.truth.experts.at("task"), (std::vector<int>{2, 5}));
  for (const auto& sf : planted.suite.sub_functions) {
    EXPECT_EQ(sf.function, "task");
    EXPECT_EQ(sf.CountLabel(1), spec.instances_per_class);
    for (int n : planted.truth.neurons.at(sf.id)) {
      const int e = n / 8;
      EXPECT_TRUE(e == 2 || e == 5);
    }
  }
  EXPECT_EQ(SynthPlantedSuite(spec, 1).suite, planted.suite);
  spec.strength = 0.0;
  EXPECT_THROW(spec.Validate(), ConfigError);
}

TEST(PlantedTest, PlantedNeuronsArePerfectPredictors) {
  PlantedSpec spec;
  spec.d_ff = 32;
  spec.num_experts = 4;
  const int experts[] = {1};
  PlantConcentrated(spec, "task", FunctionCategory::kTask, 2, 2, experts);
  const PlantedSuite planted = SynthPlantedSuite(spec, 2);
  const Model m = BuildPlantedModel(spec);
  const int layers[] = {0};
  const PredictivityTable t = BuildTable(m, planted.suite, layers);
  for (int s = 0; s < 2; ++s) {
    for (int n : planted.truth.neurons.at(planted.suite.sub_functions[s].id)) {
      EXPECT_DOUBLE_EQ(t.At(0, s, n), 1.0);
    }
  }
}

TEST(PlantedTest, TopicCorpus) {
  TopicCorpusSpec spec;
  spec.num_sequences = 50;
  const TopicCorpus c = SynthTopicCorpus(spec, 3);
  EXPECT_EQ(c.sequences.size(), 50u);
  for (const auto& seq : c.sequences) {
    for (int t : seq) {
      EXPECT_GT(t, 0);
      EXPECT_LT(t, spec.mask_token());
    }
  }
  EXPECT_EQ(c.suite.Functions().size(), 4u);
  EXPECT_EQ(c.suite.FunctionCounts().at("group_0"), 2);
}

}  // namespace
}  // namespace modscope
