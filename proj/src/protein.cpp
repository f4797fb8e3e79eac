#include "protein.hpp"

#include <array>
#include <cctype>
#include <cmath>
#include <cstring>
#include <map>
#include <sstream>

#include <json.hpp>

namespace sao::prot {

using geom::BackboneResidue;
using geom::Frame;
using geom::Vec3;
using nlohmann::json;

namespace {

constexpr const char* kOneLetter = "ACDEFGHIKLMNPQRSTVWY";

const std::array<std::string, 22> kThreeLetter = {
    "ALA", "CYS", "ASP", "GLU", "PHE", "GLY", "HIS", "ILE", "LYS", "LEU", "MET",
    "ASN", "PRO", "GLN", "ARG", "SER", "THR", "VAL", "TRP", "TYR", "UNK", "MSK"};

}  // namespace

int aa_id_from_one_letter(char c) {
  const char* p = std::strchr(kOneLetter, std::toupper(static_cast<unsigned char>(c)));
  if (p && *p) return static_cast<int>(p - kOneLetter);
  return kUnknownId;
}

char aa_one_letter_from_id(int id) {
  if (id >= 0 && id < kNumAminoAcids) return kOneLetter[id];
  if (id == kUnknownId) return 'X';
  if (id == kMaskId) return '#';
  fail(ErrorCode::InvalidArgument, "bad amino acid id " + std::to_string(id));
}

int aa_id_from_three_letter(const std::string& code) {
  for (int i = 0; i < kNumAminoAcids; ++i)
    if (kThreeLetter[i] == code) return i;
  return kUnknownId;
}

const std::string& aa_three_letter_from_id(int id) {
  if (id < 0 || id > kMaskId)
    fail(ErrorCode::InvalidArgument, "bad amino acid id " + std::to_string(id));
  return kThreeLetter[id];
}

std::string Protein::sequence_string() const {
  std::string s;
  s.reserve(sequence.size());
  for (int id : sequence) s.push_back(aa_one_letter_from_id(id));
  return s;
}

void Protein::derive() {
  const int n = static_cast<int>(backbone.size());
  frames.clear();
  frames.reserve(n);
  for (const auto& r : backbone)
    frames.push_back(geom::frame_from_backbone(r.n, r.ca, r.c));
  torsions.assign(n, Torsions{});
  for (int i = 0; i < n; ++i) {
    if (i > 0) {
      torsions[i].omega = geom::dihedral(backbone[i - 1].ca, backbone[i - 1].c,
                                         backbone[i].n, backbone[i].ca);
      torsions[i].phi = geom::dihedral(backbone[i - 1].c, backbone[i].n,
                                       backbone[i].ca, backbone[i].c);
    }
    if (i + 1 < n)
      torsions[i].psi = geom::dihedral(backbone[i].n, backbone[i].ca,
                                       backbone[i].c, backbone[i + 1].n);
  }
}

void Protein::validate() const {
  const size_t n = sequence.size();
  if (n < 2) fail(ErrorCode::SchemaError, "/sequence: fewer than 2 residues");
  if (backbone.size() != n || frames.size() != n || torsions.size() != n)
    fail(ErrorCode::SchemaError, "/backbone: length mismatch with sequence");
  for (size_t i = 0; i < n; ++i) {
    if (sequence[i] < 0 || sequence[i] > kUnknownId)
      fail(ErrorCode::SchemaError, "/sequence: stored protein may not contain MASK");
    const auto& r = backbone[i];
    for (const Vec3* v : {&r.n, &r.ca, &r.c, &r.o})
      if (!v->finite())
        fail(ErrorCode::SchemaError, "/backbone: non-finite coordinate");
    double d_nca = (r.ca - r.n).norm();
    double d_cca = (r.c - r.ca).norm();
    if (d_nca <= 0.5 || d_nca >= 3.0 || d_cca <= 0.5 || d_cca >= 3.0)
      fail(ErrorCode::SchemaError,
           "/backbone/" + std::to_string(i) + ": implausible bond length");
    Frame f = geom::frame_from_backbone(r.n, r.ca, r.c);
    double err = 0.0;
    for (int k = 0; k < 9; ++k)
      err = std::max(err, std::abs(f.rotation.m[k] - frames[i].rotation.m[k]));
    err = std::max(err, (f.translation - frames[i].translation).norm());
    if (err > 1e-6)
      fail(ErrorCode::SchemaError,
           "/frames/" + std::to_string(i) + ": not derived from backbone");
  }
}

Protein make_protein(std::string id, std::vector<int> sequence,
                     std::vector<BackboneResidue> backbone) {
  Protein p;
  p.id = std::move(id);
  p.sequence = std::move(sequence);
  p.backbone = std::move(backbone);
  p.derive();
  p.validate();
  return p;
}

namespace {

// 1-based inclusive column range, trimmed.
std::string field(const std::string& line, int from, int to) {
  if (static_cast<int>(line.size()) < from) return "";
  std::string s = line.substr(from - 1, std::min<int>(to, line.size()) - from + 1);
  size_t a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

double coord_field(const std::string& line, int from, int to, int lineno) {
  std::string s = field(line, from, to);
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::MalformedLine,
         "line " + std::to_string(lineno) + ": bad coordinate field '" + s + "'");
  }
}

struct RawResidue {
  int aa = kUnknownId;
  std::map<std::string, Vec3> atoms;
};

}  // namespace

std::vector<Protein> parse_pdb_lite(const std::string& text, const ParseOptions& opts) {
  // chain id -> resSeq -> atoms, preserving order of first appearance.
  std::vector<char> chain_order;
  std::map<char, std::vector<std::pair<int, RawResidue>>> chains;

  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (field(line, 1, 6) != "ATOM") continue;
    std::string atom_name = field(line, 13, 16);
    std::string alt_loc = field(line, 17, 17);
    std::string res_name = field(line, 18, 20);
    std::string chain_field = field(line, 22, 22);
    char chain = chain_field.empty() ? ' ' : chain_field[0];
    std::string res_seq_s = field(line, 23, 26);
    int res_seq = 0;
    try {
      res_seq = std::stoi(res_seq_s);
    } catch (const std::exception&) {
      fail(ErrorCode::MalformedLine,
           "line " + std::to_string(lineno) + ": bad residue number '" + res_seq_s + "'");
    }
    Vec3 xyz{coord_field(line, 31, 38, lineno), coord_field(line, 39, 46, lineno),
             coord_field(line, 47, 54, lineno)};
    if (atom_name != "N" && atom_name != "CA" && atom_name != "C" && atom_name != "O")
      continue;
    if (!chains.count(chain)) chain_order.push_back(chain);
    auto& residues = chains[chain];
    if (residues.empty() || residues.back().first != res_seq) {
      residues.push_back({res_seq, RawResidue{}});
      residues.back().second.aa = aa_id_from_three_letter(res_name);
    }
    auto& atoms = residues.back().second.atoms;
    if (!atoms.count(atom_name))  // keep first altLoc
      atoms[atom_name] = xyz;
    else if (!alt_loc.empty() && alt_loc != "A") {
      // later altLoc conformers ignored
    }
  }

  std::vector<Protein> out;
  for (char chain : chain_order) {
    const auto& residues = chains[chain];
    std::vector<int> seq;
    std::vector<BackboneResidue> bb;
    for (const auto& [res_seq, raw] : residues) {
      bool complete = raw.atoms.count("N") && raw.atoms.count("CA") &&
                      raw.atoms.count("C") && raw.atoms.count("O");
      if (!complete) {
        if (opts.strict)
          fail(ErrorCode::MissingBackboneAtom,
               std::string("chain ") + chain + " residue " + std::to_string(res_seq) +
                   ": incomplete backbone");
        continue;
      }
      seq.push_back(raw.aa);
      bb.push_back({raw.atoms.at("N"), raw.atoms.at("CA"), raw.atoms.at("C"),
                    raw.atoms.at("O")});
    }
    if (seq.size() < 2)
      fail(ErrorCode::ChainTooShort,
           std::string("chain ") + chain + ": fewer than 2 complete residues");
    out.push_back(make_protein(std::string(1, chain), std::move(seq), std::move(bb)));
  }
  return out;
}

namespace {

double round6(double v) { return std::round(v * 1e6) / 1e6; }

json atom_json(const Vec3& v) {
  return json::array({round6(v.x), round6(v.y), round6(v.z)});
}

Vec3 atom_from_json(const json& a, const std::string& where) {
  if (!a.is_array() || a.size() != 3 || !a[0].is_number())
    fail(ErrorCode::SchemaError, where + ": expected [x, y, z]");
  return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

}  // namespace

std::string write_protein_json(const Protein& p) {
  json residues = json::array();
  for (const auto& r : p.backbone)
    residues.push_back(json::array(
        {atom_json(r.n), atom_json(r.ca), atom_json(r.c), atom_json(r.o)}));
  json j = {{"format", 1},
            {"id", p.id},
            {"sequence", p.sequence_string()},
            {"backbone", residues}};
  return j.dump();
}

Protein read_protein_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaError, std::string("/: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorCode::SchemaError, "/: expected object");
  if (!j.contains("format") || j["format"] != 1)
    fail(ErrorCode::SchemaError, "/format: expected 1");
  if (!j.contains("id") || !j["id"].is_string())
    fail(ErrorCode::SchemaError, "/id: expected string");
  if (!j.contains("sequence") || !j["sequence"].is_string())
    fail(ErrorCode::SchemaError, "/sequence: expected string");
  if (!j.contains("backbone") || !j["backbone"].is_array())
    fail(ErrorCode::SchemaError, "/backbone: expected array");
  std::string seq_s = j["sequence"].get<std::string>();
  if (seq_s.empty()) fail(ErrorCode::SchemaError, "/sequence: empty");
  if (seq_s.size() != j["backbone"].size())
    fail(ErrorCode::SchemaError, "/backbone: length differs from /sequence");
  std::vector<int> seq;
  for (char c : seq_s) {
    int id = aa_id_from_one_letter(c);
    if (c == '#') fail(ErrorCode::SchemaError, "/sequence: MASK not allowed on disk");
    seq.push_back(id);
  }
  std::vector<BackboneResidue> bb;
  for (size_t i = 0; i < j["backbone"].size(); ++i) {
    const json& r = j["backbone"][i];
    std::string where = "/backbone/" + std::to_string(i);
    if (!r.is_array() || r.size() != 4)
      fail(ErrorCode::SchemaError, where + ": expected 4 atoms");
    bb.push_back({atom_from_json(r[0], where + "/0"), atom_from_json(r[1], where + "/1"),
                  atom_from_json(r[2], where + "/2"), atom_from_json(r[3], where + "/3")});
  }
  try {
    return make_protein(j["id"].get<std::string>(), std::move(seq), std::move(bb));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::SchemaError) throw;
    fail(ErrorCode::SchemaError, std::string("/backbone: ") + e.what());
  }
}

std::vector<ManifestEntry> DatasetManifest::split(const std::string& name) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries)
    if (e.split == name) out.push_back(e);
  return out;
}

std::string write_manifest_json(const DatasetManifest& m) {
  json entries = json::array();
  for (const auto& e : m.entries)
    entries.push_back({{"pair", e.pair_path}, {"labels", e.label_path}, {"split", e.split}});
  return json{{"format", 1}, {"entries", entries}}.dump(2);
}

DatasetManifest read_manifest_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::SchemaError, std::string("/: invalid manifest JSON: ") + e.what());
  }
  DatasetManifest m;
  if (!j.contains("entries") || !j["entries"].is_array())
    fail(ErrorCode::SchemaError, "/entries: expected array");
  for (const auto& e : j["entries"])
    m.entries.push_back({e.at("pair").get<std::string>(),
                         e.at("labels").get<std::string>(),
                         e.at("split").get<std::string>()});
  return m;
}

}  // namespace sao::prot
