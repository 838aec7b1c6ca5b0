// Copyright (c) 2026 attnfold contributors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"

using namespace attnfold;

namespace {

const char* kMinimalDoc = R"({
  "tensors": [
    {"id": "a", "dims": [8, 8], "role": "Q"},
    {"id": "b", "dims": [8, 8]},
    {"id": "c", "dims": [8, 8]},
    {"id": "d", "dims": [8, 8]}
  ],
  "nodes": [
    {"id": "mm", "kind": "MatMul", "inputs": ["a", "b"], "outputs": ["c"]},
    {"id": "sm", "kind": "SoftMax", "inputs": ["c"], "outputs": ["d"], "attrs": {"axis": -1}}
  ]
})";

}  // namespace

TEST_CASE("minimal two-node document parses", "[graph]") {
  const Graph g = parse_graph(kMinimalDoc);
  CHECK(g.nodes().size() == 2);
  CHECK(g.tensors().size() == 4);
  CHECK(g.node("mm").kind == NodeKind::MatMul);
  CHECK(g.tensor("a").role == TensorRole::Q);
  CHECK(g.producer_of("c")->id == "mm");
  CHECK(g.producer_of("a") == nullptr);
  CHECK(g.consumers_of("c").size() == 1);
}

TEST_CASE("undeclared tensor is a validation error naming the node", "[graph]") {
  const std::string doc = R"({
    "tensors": [{"id": "a", "dims": [8, 8]}],
    "nodes": [{"id": "n3", "kind": "SoftMax", "inputs": ["ghost"], "outputs": ["a"]}]
  })";
  try {
    parse_graph(doc);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    const std::string what = e.what();
    CHECK(what.find("n3") != std::string::npos);
    CHECK(what.find("ghost") != std::string::npos);
  }
}

TEST_CASE("malformed JSON is a parse error", "[graph]") {
  CHECK_THROWS_AS(parse_graph("{{{"), ParseError);
  CHECK_THROWS_AS(parse_graph(R"({"tensors": []})"), ValidationError);
}

TEST_CASE("cycles are rejected", "[graph]") {
  const std::string doc = R"({
    "tensors": [{"id": "a", "dims": [8, 8]}, {"id": "b", "dims": [8, 8]}],
    "nodes": [
      {"id": "n1", "kind": "SoftMax", "inputs": ["a"], "outputs": ["b"]},
      {"id": "n2", "kind": "SoftMax", "inputs": ["b"], "outputs": ["a"]}
    ]
  })";
  CHECK_THROWS_AS(parse_graph(doc), ValidationError);
}

TEST_CASE("shape mismatches are rejected per node kind", "[graph]") {
  // inner dims differ
  const std::string bad_mm = R"({
    "tensors": [
      {"id": "a", "dims": [8, 16]}, {"id": "b", "dims": [8, 8]}, {"id": "c", "dims": [8, 8]}
    ],
    "nodes": [{"id": "mm", "kind": "MatMul", "inputs": ["a", "b"], "outputs": ["c"]}]
  })";
  CHECK_THROWS_AS(parse_graph(bad_mm), ValidationError);

  // declared output disagrees with operands
  const std::string bad_out = R"({
    "tensors": [
      {"id": "a", "dims": [8, 8]}, {"id": "b", "dims": [8, 8]}, {"id": "c", "dims": [4, 8]}
    ],
    "nodes": [{"id": "mm", "kind": "MatMul", "inputs": ["a", "b"], "outputs": ["c"]}]
  })";
  CHECK_THROWS_AS(parse_graph(bad_out), ValidationError);

  // SoftMax must preserve the shape
  const std::string bad_sm = R"({
    "tensors": [{"id": "a", "dims": [8, 8]}, {"id": "b", "dims": [8, 4]}],
    "nodes": [{"id": "sm", "kind": "SoftMax", "inputs": ["a"], "outputs": ["b"]}]
  })";
  CHECK_THROWS_AS(parse_graph(bad_sm), ValidationError);
}

TEST_CASE("transposed matmul forms check the swapped inner dim", "[graph]") {
  const std::string doc = R"({
    "tensors": [
      {"id": "q", "dims": [16, 8]}, {"id": "k", "dims": [24, 8]}, {"id": "s", "dims": [16, 24]}
    ],
    "nodes": [{"id": "mm", "kind": "TransposedMatMul", "inputs": ["q", "k"], "outputs": ["s"]}]
  })";
  CHECK_NOTHROW(parse_graph(doc));

  const std::string doc2 = R"({
    "tensors": [
      {"id": "q", "dims": [16, 8]}, {"id": "k", "dims": [24, 8]}, {"id": "s", "dims": [16, 24]}
    ],
    "nodes": [{"id": "mm", "kind": "MatMul", "inputs": ["q", "k"], "outputs": ["s"],
               "attrs": {"transpose_b": true}}]
  })";
  CHECK_NOTHROW(parse_graph(doc2));
}

TEST_CASE("leading dims broadcast in batched matmul", "[graph]") {
  const std::string doc = R"({
    "tensors": [
      {"id": "q", "dims": [8, 16, 8]}, {"id": "k", "dims": [1, 24, 8]},
      {"id": "s", "dims": [8, 16, 24]}
    ],
    "nodes": [{"id": "mm", "kind": "TransposedMatMul", "inputs": ["q", "k"], "outputs": ["s"]}]
  })";
  CHECK_NOTHROW(parse_graph(doc));

  const std::string bad = R"({
    "tensors": [
      {"id": "q", "dims": [8, 16, 8]}, {"id": "k", "dims": [3, 24, 8]},
      {"id": "s", "dims": [8, 16, 24]}
    ],
    "nodes": [{"id": "mm", "kind": "TransposedMatMul", "inputs": ["q", "k"], "outputs": ["s"]}]
  })";
  CHECK_THROWS_AS(parse_graph(bad), ValidationError);
}

TEST_CASE("transpose perm is validated", "[graph]") {
  const std::string doc = R"({
    "tensors": [{"id": "a", "dims": [8, 4]}, {"id": "b", "dims": [4, 8]}],
    "nodes": [{"id": "t", "kind": "Transpose", "inputs": ["a"], "outputs": ["b"],
               "attrs": {"perm": [1, 1]}}]
  })";
  CHECK_THROWS_AS(parse_graph(doc), ValidationError);
}

TEST_CASE("duplicate producers are rejected", "[graph]") {
  const std::string doc = R"({
    "tensors": [{"id": "a", "dims": [8, 8]}, {"id": "b", "dims": [8, 8]}],
    "nodes": [
      {"id": "n1", "kind": "SoftMax", "inputs": ["a"], "outputs": ["b"]},
      {"id": "n2", "kind": "SoftMax", "inputs": ["a"], "outputs": ["b"]}
    ]
  })";
  CHECK_THROWS_AS(parse_graph(doc), ValidationError);
}

TEST_CASE("serialize/parse round trip is isomorphic", "[graph]") {
  const Graph g = testutil::make_mha_graph(3, {16, 24, 8, 8}, /*mask=*/true);
  const std::string text = serialize(g);
  const Graph g2 = parse_graph(text);
  CHECK(serialize(g2) == text);
  CHECK(g2.nodes().size() == g.nodes().size());
  CHECK(g2.tensors().size() == g.tensors().size());

  // Same graph with shuffled node declaration order parses to the same
  // serialized form (topological order is canonical).
  nlohmann::json doc = nlohmann::json::parse(text);
  std::reverse(doc["nodes"].begin(), doc["nodes"].end());
  const Graph g3 = parse_graph(doc.dump());
  CHECK(g3.nodes().size() == g.nodes().size());
  for (const Node& n : g.nodes()) CHECK(g3.node(n.id).kind == n.kind);
}

TEST_CASE("BERT-style 12-head subgraph yields 12 parallel chains", "[graph]") {
  const Graph g = testutil::make_mha_graph(12, {128, 128, 64, 64}, /*mask=*/true);
  CHECK(g.nodes().size() == 12 * 5);
  const auto matches = match_attention(g);
  CHECK(matches.size() == 12);
}

TEST_CASE("attrs survive the round trip", "[graph]") {
  const std::string doc = R"({
    "tensors": [{"id": "a", "dims": [8, 8]}, {"id": "b", "dims": [8, 8]}],
    "nodes": [{"id": "sm", "kind": "SoftMax", "inputs": ["a"], "outputs": ["b"],
               "attrs": {"axis": -1, "note": "keep"}}]
  })";
  const Graph g = parse_graph(doc);
  const Graph g2 = parse_graph(serialize(g));
  CHECK(g2.node("sm").attrs.at("note") == "keep");
}
