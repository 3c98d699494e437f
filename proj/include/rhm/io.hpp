#pragma once

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "rhm/analysis.hpp"
#include "rhm/grammar.hpp"
#include "rhm/tasks.hpp"

namespace rhm {

inline constexpr int kGrammarFormatVersion = 1;
inline constexpr int kDatasetSchemaVersion = 1;
inline constexpr int kEpisodeSchemaVersion = 1;

// Text dump:
//   rhm-grammar 1
//   params <v> <m> <s> <L> <seed>
//   dist <level> uniform | dist <level> zipf <exponent>
//   rule <level> <symbol> <k> <t1> ... <ts>
// Exponents are printed in shortest round-trip form, so reading a dump
// reconstructs an equal Grammar.
void write_grammar(std::ostream& out, const Grammar& grammar);
Grammar read_grammar(std::istream& in);  // throws FormatError, ParameterError

// JSON lines: a {"schema":"rhm-dataset","version":1} header, then one
// {"tokens":[..],"root":r,"rules":[..]} record per sequence.
void write_dataset(std::ostream& out, const SequenceSet& set);
// With a grammar, each record is re-expanded and must reproduce its tokens.
SequenceSet read_dataset(std::istream& in, const Grammar* grammar = nullptr);

struct EpisodeRecord {
  EvalCondition condition = EvalCondition::Mem;
  std::vector<std::uint32_t> ids;
  std::size_t target_position = 0;
  std::uint32_t target = 0;
  std::uint32_t root = 0;

  bool operator==(const EpisodeRecord&) const = default;
};

EpisodeRecord to_record(const TokenStream& stream, EvalCondition condition);

// JSON lines with a {"schema":"rhm-episodes","version":1} header.
void write_episodes(std::ostream& out, std::span<const EpisodeRecord> records);
std::vector<EpisodeRecord> read_episodes(std::istream& in);

// Analysis CSVs, one header line each.
inline constexpr const char* kSpecializationHeader = "step,layer,head,condition,score";
inline constexpr const char* kPcaHeader = "step,layer,component,ratio";
inline constexpr const char* kClustersHeader = "step,layer,head,cluster";

struct PcaRow {
  std::int64_t step;
  std::uint32_t layer;
  std::uint32_t component;
  double ratio;
};

struct ClusterRow {
  std::int64_t step;
  std::uint32_t layer;
  std::uint32_t head;
  std::uint32_t cluster;
};

void write_specialization_csv(std::ostream& out, std::span<const SpecializationRecord> rows);
void write_pca_csv(std::ostream& out, std::span<const PcaRow> rows);
void write_clusters_csv(std::ostream& out, std::span<const ClusterRow> rows);

// Shortest decimal form that parses back to the same double.
std::string format_double(double x);

// Writes `content` to `path`, creating parent directories. Throws
// ParameterError when the file exists and overwrite is false.
void write_text_file(const std::filesystem::path& path, const std::string& content, bool overwrite);
// Throws MissingArtifactError naming the path when it does not exist.
std::string read_text_file(const std::filesystem::path& path);

}  // namespace rhm
