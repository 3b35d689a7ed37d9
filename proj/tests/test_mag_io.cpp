#include "magdi/mag_io.hpp"

#include <gtest/gtest.h>

#include <filesystem>

namespace magdi {
namespace {

Mag sample_graph(int rounds) {
    std::vector<std::vector<AgentOutput>> outputs;
    for (int j = 0; j <= rounds; ++j) {
        outputs.push_back({{"3+5=8; 8+9=17; 17 mod 10 = 7; answer: 7", "7"},
                           {"3+5=9; 9+9=18; 18 mod 10 = 8; answer: 8", "8"},
                           {"3+5=8; 8+9=\"17\"\\n; answer: 7", "7"}});
    }
    return build_mag({"modsum-000001", "3+5+9 mod 10 = ?", "7"}, outputs);
}

MagErrc error_of(const std::string& text) {
    try {
        deserialize(text);
    } catch (const MagError& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected rejection of " << text;
    return MagErrc::Io;
}

TEST(MagJson, RoundTripIsIdentity) {
    for (int r = 0; r <= 3; ++r) {
        const Mag mag = sample_graph(r);
        const std::string text = serialize(mag);
        EXPECT_EQ(deserialize(text), mag);
        EXPECT_EQ(serialize(deserialize(text)), text);
    }
}

TEST(MagJson, KeyOrderIsFixed) {
    const std::string text = serialize(sample_graph(0));
    EXPECT_EQ(text.rfind("{\"instance\":{\"id\":\"modsum-000001\",\"question\":", 0), 0u);
    EXPECT_NE(text.find("\"n_agents\":3,\"nodes\":[{\"id\":0,\"agent\":0,\"round\":0,\"reasoning\":"), std::string::npos);
    EXPECT_NE(text.find("\"edges\":[]}"), std::string::npos);
}

TEST(MagJson, EdgeFromRoundTwoToRoundOneIsAcyclicityError) {
    auto j = to_json(sample_graph(2));
    j["edges"][0] = ordered_json::array({6, 3});
    EXPECT_EQ(error_of(j.dump()), MagErrc::Acyclicity);
}

TEST(MagJson, DuplicateAgentRoundIsUniquenessError) {
    auto j = to_json(sample_graph(1));
    j["nodes"][1]["agent"] = 0;
    EXPECT_EQ(error_of(j.dump()), MagErrc::DuplicateNode);
}

TEST(MagJson, DistinctCodesForEachFailureKind) {
    EXPECT_EQ(error_of("{\"instance\": "), MagErrc::MalformedJson);

    auto extra = to_json(sample_graph(0));
    extra["confidence"] = 0.9;
    EXPECT_EQ(error_of(extra.dump()), MagErrc::Schema);

    auto wrong_type = to_json(sample_graph(0));
    wrong_type["nodes"][0]["label"] = "1";
    EXPECT_EQ(error_of(wrong_type.dump()), MagErrc::Schema);

    auto bad_label = to_json(sample_graph(0));
    bad_label["nodes"][0]["label"] = 0;
    EXPECT_EQ(error_of(bad_label.dump()), MagErrc::LabelMismatch);

    auto missing_edge = to_json(sample_graph(1));
    missing_edge["edges"].erase(missing_edge["edges"].begin());
    EXPECT_EQ(error_of(missing_edge.dump()), MagErrc::MissingEdge);

    auto missing_node = to_json(sample_graph(1));
    missing_node["nodes"].erase(missing_node["nodes"].begin() + 5);
    EXPECT_EQ(error_of(missing_node.dump()), MagErrc::MissingNode);
}

TEST(MagJson, CorpusFileRoundTrip) {
    const Corpus corpus{sample_graph(0), sample_graph(3), sample_graph(1)};
    const auto path = std::filesystem::temp_directory_path() / "magdi_test_corpus.jsonl";
    save_corpus(path, corpus);
    EXPECT_EQ(load_corpus(path), corpus);
    const std::string text = read_text_file(path);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
    std::filesystem::remove(path);
}

TEST(MagJson, CorpusErrorsCarryLineNumber) {
    const std::string text = serialize(sample_graph(0)) + "\n{oops}\n";
    try {
        deserialize_corpus(text);
        FAIL();
    } catch (const MagError& e) {
        EXPECT_EQ(e.code(), MagErrc::MalformedJson);
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
}

}  // namespace
}  // namespace magdi
