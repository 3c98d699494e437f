#include "rhm/io.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "rhm/error.hpp"

namespace rhm {

using nlohmann::json;

std::string format_double(double x) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, end);
}

namespace {

template <class T>
T parse_number(const std::string& word, const std::string& where) {
  T value{};
  const char* first = word.data();
  const char* last = first + word.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw FormatError(where + ": expected a number, got '" + word + "'");
  }
  return value;
}

json parse_line(const std::string& line, std::size_t line_no, const char* what) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(std::string(what) + " line " + std::to_string(line_no) + ": " + e.what());
  }
}

void check_header(std::istream& in, const char* schema, int version) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(std::string(schema) + ": empty file");
  const json h = parse_line(line, 1, schema);
  if (!h.is_object() || h.value("schema", std::string()) != schema) {
    throw FormatError(std::string(schema) + ": missing schema header");
  }
  if (h.value("version", -1) != version) {
    throw FormatError(std::string(schema) + ": unsupported version " + h.value("version", json()).dump());
  }
}

template <class T>
std::vector<T> get_array(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_array()) throw FormatError(where + ": missing '" + key + "'");
  try {
    return j.at(key).get<std::vector<T>>();
  } catch (const json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
}

template <class T>
T get_number(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_number_unsigned()) {
    throw FormatError(where + ": missing or negative '" + key + "'");
  }
  return j.at(key).get<T>();
}

}  // namespace

void write_grammar(std::ostream& out, const Grammar& grammar) {
  const auto& p = grammar.params();
  out << "rhm-grammar " << kGrammarFormatVersion << '\n';
  out << "params " << p.v << ' ' << p.m << ' ' << p.s << ' ' << p.L << ' ' << p.seed << '\n';
  for (std::uint32_t l = 1; l <= p.L; ++l) {
    const auto& d = p.dist(l);
    out << "dist " << l << ' ';
    if (d.kind == RuleDistribution::Kind::Uniform) {
      out << "uniform\n";
    } else {
      out << "zipf " << format_double(d.exponent) << '\n';
    }
  }
  for (std::uint32_t l = p.L; l >= 1; --l) {
    for (Symbol y = 0; y < p.v; ++y) {
      for (std::uint32_t k = 0; k < p.m; ++k) {
        out << "rule " << l << ' ' << y << ' ' << k;
        for (Symbol t : grammar.production(l, y, k)) out << ' ' << t;
        out << '\n';
      }
    }
  }
}

Grammar read_grammar(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  auto where = [&] { return "grammar line " + std::to_string(line_no); };
  auto words_of = [](const std::string& s) {
    std::istringstream is(s);
    std::vector<std::string> w;
    for (std::string x; is >> x;) w.push_back(x);
    return w;
  };

  if (!std::getline(in, line)) throw FormatError("grammar: empty file");
  ++line_no;
  auto words = words_of(line);
  if (words.size() != 2 || words[0] != "rhm-grammar") throw FormatError("grammar: missing header");
  if (parse_number<int>(words[1], where()) != kGrammarFormatVersion) {
    throw FormatError("grammar: unsupported version " + words[1]);
  }

  GrammarParams p;
  bool have_params = false;
  std::map<std::uint32_t, RuleDistribution> dists;
  std::vector<std::vector<Symbol>> tables;
  std::vector<std::vector<bool>> seen;

  while (std::getline(in, line)) {
    ++line_no;
    words = words_of(line);
    if (words.empty()) continue;
    if (words[0] == "params") {
      if (words.size() != 6 || have_params) throw FormatError(where() + ": bad params line");
      p.v = parse_number<std::uint32_t>(words[1], where());
      p.m = parse_number<std::uint32_t>(words[2], where());
      p.s = parse_number<std::uint32_t>(words[3], where());
      p.L = parse_number<std::uint32_t>(words[4], where());
      p.seed = parse_number<std::uint64_t>(words[5], where());
      have_params = true;
      if (p.L < 1 || p.L > 64 || p.s < 1 || p.m < 1 || p.v < 1) {
        throw FormatError(where() + ": params out of range");
      }
      const std::uint64_t cells = static_cast<std::uint64_t>(p.v) * p.m * p.s;
      if (cells > (std::uint64_t{1} << 32)) throw FormatError(where() + ": table too large");
      tables.assign(p.L, std::vector<Symbol>(cells, 0));
      seen.assign(p.L, std::vector<bool>(static_cast<std::size_t>(p.v) * p.m, false));
    } else if (words[0] == "dist") {
      if (!have_params) throw FormatError(where() + ": dist before params");
      if (words.size() < 3) throw FormatError(where() + ": bad dist line");
      const auto level = parse_number<std::uint32_t>(words[1], where());
      if (level < 1 || level > p.L || dists.count(level)) {
        throw FormatError(where() + ": bad or repeated dist level");
      }
      if (words[2] == "uniform" && words.size() == 3) {
        dists[level] = RuleDistribution::uniform();
      } else if (words[2] == "zipf" && words.size() == 4) {
        dists[level] = RuleDistribution::zipf(parse_number<double>(words[3], where()));
      } else {
        throw FormatError(where() + ": unknown distribution");
      }
    } else if (words[0] == "rule") {
      if (!have_params) throw FormatError(where() + ": rule before params");
      if (words.size() != 4 + p.s) throw FormatError(where() + ": rule needs s symbols");
      const auto level = parse_number<std::uint32_t>(words[1], where());
      const auto sym = parse_number<std::uint32_t>(words[2], where());
      const auto k = parse_number<std::uint32_t>(words[3], where());
      if (level < 1 || level > p.L || sym >= p.v || k >= p.m) {
        throw FormatError(where() + ": rule index out of range");
      }
      const std::size_t slot = static_cast<std::size_t>(sym) * p.m + k;
      if (seen[level - 1][slot]) throw FormatError(where() + ": duplicate rule");
      seen[level - 1][slot] = true;
      for (std::uint32_t i = 0; i < p.s; ++i) {
        const auto t = parse_number<std::uint32_t>(words[4 + i], where());
        if (t >= p.v) throw FormatError(where() + ": symbol out of range");
        tables[level - 1][slot * p.s + i] = t;
      }
    } else {
      throw FormatError(where() + ": unknown record '" + words[0] + "'");
    }
  }
  if (!have_params) throw FormatError("grammar: missing params line");
  if (dists.size() != p.L) throw FormatError("grammar: one dist line per level required");
  for (const auto& level : seen) {
    for (bool b : level) {
      if (!b) throw FormatError("grammar: incomplete rule table");
    }
  }
  for (std::uint32_t l = 1; l <= p.L; ++l) p.layer_dists.push_back(dists[l]);
  return Grammar(p, std::move(tables));
}

void write_dataset(std::ostream& out, const SequenceSet& set) {
  out << json{{"schema", "rhm-dataset"}, {"version", kDatasetSchemaVersion}}.dump() << '\n';
  for (const auto& t : set) {
    out << json{{"tokens", t.leaves}, {"root", t.root}, {"rules", t.rules}}.dump() << '\n';
  }
}

SequenceSet read_dataset(std::istream& in, const Grammar* grammar) {
  check_header(in, "rhm-dataset", kDatasetSchemaVersion);
  SequenceSet out;
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "dataset line " + std::to_string(line_no);
    const json j = parse_line(line, line_no, "dataset");
    DerivationTree t;
    t.leaves = get_array<Symbol>(j, "tokens", where);
    t.rules = get_array<std::uint32_t>(j, "rules", where);
    t.root = get_number<Symbol>(j, "root", where);
    if (grammar) {
      DerivationTree re;
      try {
        re = expand(*grammar, t.root, t.rules);
      } catch (const Error& e) {
        throw FormatError(where + ": " + e.what());
      }
      if (re.leaves != t.leaves) throw FormatError(where + ": tokens disagree with the rule choices");
    }
    out.push_back(std::move(t));
  }
  return out;
}

EpisodeRecord to_record(const TokenStream& stream, EvalCondition condition) {
  return {condition, stream.ids, stream.target_position, stream.target, stream.root_label};
}

void write_episodes(std::ostream& out, std::span<const EpisodeRecord> records) {
  out << json{{"schema", "rhm-episodes"}, {"version", kEpisodeSchemaVersion}}.dump() << '\n';
  for (const auto& r : records) {
    out << json{{"condition", std::string(to_string(r.condition))},
                {"ids", r.ids},
                {"target_position", r.target_position},
                {"target", r.target},
                {"root", r.root}}
               .dump()
        << '\n';
  }
}

std::vector<EpisodeRecord> read_episodes(std::istream& in) {
  check_header(in, "rhm-episodes", kEpisodeSchemaVersion);
  std::vector<EpisodeRecord> out;
  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = "episodes line " + std::to_string(line_no);
    const json j = parse_line(line, line_no, "episodes");
    EpisodeRecord r;
    if (!j.contains("condition") || !j.at("condition").is_string()) {
      throw FormatError(where + ": missing 'condition'");
    }
    try {
      r.condition = parse_condition(j.at("condition").get<std::string>());
    } catch (const Error& e) {
      throw FormatError(where + ": " + e.what());
    }
    r.ids = get_array<std::uint32_t>(j, "ids", where);
    r.target_position = get_number<std::size_t>(j, "target_position", where);
    r.target = get_number<std::uint32_t>(j, "target", where);
    r.root = get_number<std::uint32_t>(j, "root", where);
    out.push_back(std::move(r));
  }
  return out;
}

void write_specialization_csv(std::ostream& out, std::span<const SpecializationRecord> rows) {
  out << kSpecializationHeader << '\n';
  for (const auto& r : rows) {
    out << r.step << ',' << r.layer << ',' << r.head << ',' << to_string(r.condition) << ','
        << format_double(r.score) << '\n';
  }
}

void write_pca_csv(std::ostream& out, std::span<const PcaRow> rows) {
  out << kPcaHeader << '\n';
  for (const auto& r : rows) {
    out << r.step << ',' << r.layer << ',' << r.component << ',' << format_double(r.ratio) << '\n';
  }
}

void write_clusters_csv(std::ostream& out, std::span<const ClusterRow> rows) {
  out << kClustersHeader << '\n';
  for (const auto& r : rows) {
    out << r.step << ',' << r.layer << ',' << r.head << ',' << r.cluster << '\n';
  }
}

void write_text_file(const std::filesystem::path& path, const std::string& content, bool overwrite) {
  if (!overwrite && std::filesystem::exists(path)) {
    throw ParameterError(path.string() + " already exists (use --force to overwrite)");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << content;
  if (!out) throw Error("failed writing " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace rhm
