// Generates a small planted-cluster dataset, trains the retriever and the GCN
// ranker with the mock LLM, then recommends items for one user.

#include <iostream>

#include "corona/corona.hpp"

using namespace corona;

int main() {
  PipelineConfig cfg = PipelineConfig::from_json(nlohmann::json::parse(R"({
    "retrieval": {"k": 30},
    "training": {"dim": 64, "hidden": 64, "lr": 0.001, "max_epochs": 2},
    "synth": {"users": 120, "items": 200, "clusters": 4}
  })"));
  cfg.llm.cache_dir.clear();  // in-memory cache only

  const Dataset ds = generate_synthetic(cfg.synth, cfg.llm);
  const DatasetBundle data = DatasetBundle::from_dataset(ds);
  LlmGateway gateway(cfg.llm);
  Pipeline pipeline(data, cfg, gateway);

  const RetrieverParams retriever = pipeline.train_retriever(1).params;
  const GnnParams gnn = pipeline.train_gnn(Mode::Corona, &retriever, 1).params;

  const UserId user = 0;
  const auto trace = pipeline.corona_retrieve(data.graph, retriever, user);
  std::cout << "stage 1 kept " << trace.stage1.subgraph.users.size() << " users, stage 2 kept " << trace.stage2.subgraph.users.size()
            << "\n\npreference prompt:\n" << trace.stage1.prompt << "\n\nsummary:\n" << trace.stage1.summary.rendered_text << "\n\n";

  const Vector h = gcn_forward(trace.stage2.subgraph, data.features, gnn, user);
  const RankedList ranked = rank_items(trace.stage2.subgraph, h, data.features, data.graph.items_of(user), user);
  std::cout << "top items for " << data.graph.users().name(user) << ":\n";
  for (std::size_t i = 0; i < std::min<std::size_t>(5, ranked.size()); ++i) {
    const ItemRecord& item = data.texts.item(ranked.entries[i].first);
    std::cout << "  " << i + 1 << ". " << item.title << " (" << ranked.entries[i].second << ")\n";
  }

  const auto metrics = pipeline.evaluate(Mode::Corona, &retriever, gnn, pipeline.test_cases());
  std::cout << "\nRecall@20 over " << metrics.users << " test users: " << metrics.recall.at(20) << '\n';
}
