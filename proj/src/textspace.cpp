#include "ovdet/textspace.hpp"

#include <cstring>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "ovdet/common.hpp"

namespace ovdet::textspace {

using nlohmann::json;

namespace {

ExternalEncoderFn& external_encoder() {
  static ExternalEncoderFn fn;
  return fn;
}

constexpr std::uint64_t kTokenSalt = 0x7465787470726f74ull;
constexpr std::uint64_t kBackgroundSalt = 0x6267726f77000000ull;

std::vector<std::string> split_tokens(const std::string& name) {
  std::vector<std::string> tokens;
  std::istringstream is(name);
  std::string tok;
  while (is >> tok) tokens.push_back(tok);
  return tokens;
}

Eigen::VectorXd normalized_or_throw(Eigen::VectorXd v, const std::string& what) {
  const double n = v.norm();
  if (!(n > 0.0) || !v.allFinite()) {
    throw std::runtime_error("cannot normalize embedding for " + what);
  }
  return v / n;
}

}  // namespace

std::string encoder_kind_name(EncoderKind k) {
  switch (k) {
    case EncoderKind::Compositional: return "compositional";
    case EncoderKind::Hashed: return "hashed";
    case EncoderKind::External: return "external";
  }
  throw std::logic_error("unreachable encoder kind");
}

EncoderKind encoder_kind_from_name(const std::string& name) {
  if (name == "compositional") return EncoderKind::Compositional;
  if (name == "hashed") return EncoderKind::Hashed;
  if (name == "external") return EncoderKind::External;
  throw std::runtime_error("unknown encoder kind: " + name);
}

void set_external_encoder(ExternalEncoderFn fn) { external_encoder() = std::move(fn); }
void clear_external_encoder() { external_encoder() = nullptr; }

Eigen::VectorXd token_embedding(const std::string& token, int d, std::uint64_t seed) {
  if (d < 8) throw std::invalid_argument("embedding dimension must be >= 8");
  Rng rng(mix_seed(mix_seed(seed, kTokenSalt), hash64(token)));
  return rng.unit_vector(d);
}

namespace {

void validate_spec(const EncoderSpec& spec) {
  if (spec.d < 8) throw std::invalid_argument("EncoderSpec: d must be >= 8");
  const auto first = spec.prompt_template.find("{name}");
  if (first == std::string::npos ||
      spec.prompt_template.find("{name}", first + 1) != std::string::npos) {
    throw std::invalid_argument("EncoderSpec: template must contain exactly one {name} slot");
  }
}

std::string apply_template(const std::string& tmpl, const std::string& name) {
  std::string out = tmpl;
  out.replace(out.find("{name}"), 6, name);
  return out;
}

}  // namespace

Eigen::VectorXd encode_category(const std::string& name, const EncoderSpec& spec) {
  if (name.empty()) throw std::invalid_argument("encode_category: empty name");
  validate_spec(spec);
  switch (spec.kind) {
    case EncoderKind::Compositional: {
      const auto tokens = split_tokens(name);
      if (tokens.size() < 2) {
        throw std::runtime_error("compositional encoder needs at least two tokens, got '" +
                                 name + "'");
      }
      Eigen::VectorXd sum = Eigen::VectorXd::Zero(spec.d);
      for (const auto& tok : tokens) sum += token_embedding(tok, spec.d, spec.seed);
      return normalized_or_throw(std::move(sum), name);
    }
    case EncoderKind::Hashed: {
      Rng rng(mix_seed(mix_seed(spec.seed, kTokenSalt), hash64("whole:" + name)));
      return rng.unit_vector(spec.d);
    }
    case EncoderKind::External: {
      if (!external_encoder()) {
        throw std::runtime_error("external encoder adapter is not registered");
      }
      Eigen::VectorXd v = external_encoder()(apply_template(spec.prompt_template, name));
      if (v.size() != spec.d) {
        throw std::runtime_error("external encoder returned dimension " +
                                 std::to_string(v.size()) + ", expected " +
                                 std::to_string(spec.d));
      }
      return normalized_or_throw(std::move(v), name);
    }
  }
  throw std::logic_error("unreachable encoder kind");
}

Eigen::MatrixXd PrototypeBank::full_matrix() const {
  if (!background_) return matrix_;
  Eigen::MatrixXd full(matrix_.rows() + 1, matrix_.cols());
  full.topRows(matrix_.rows()) = matrix_;
  full.row(matrix_.rows()) = background_->transpose();
  return full;
}

int PrototypeBank::index_of(const std::string& category) const {
  for (std::size_t i = 0; i < categories_.size(); ++i) {
    if (categories_[i] == category) return static_cast<int>(i);
  }
  return -1;
}

void PrototypeBank::set_background(const Eigen::VectorXd& row) {
  if (frozen_) throw std::runtime_error("frozen prototype bank rejects mutation");
  if (row.size() != matrix_.cols()) {
    throw std::invalid_argument("background row dimension mismatch");
  }
  background_ = normalized_or_throw(row, "background");
}

PrototypeBank build_prototype_bank(const std::vector<std::string>& categories,
                                   const EncoderSpec& spec, bool include_background) {
  if (categories.empty()) throw std::invalid_argument("prototype bank needs categories");
  validate_spec(spec);
  {
    std::set<std::string> uniq(categories.begin(), categories.end());
    if (uniq.size() != categories.size()) {
      throw std::runtime_error("duplicate category names in prototype bank");
    }
  }
  PrototypeBank bank;
  bank.spec_ = spec;
  bank.categories_ = categories;
  bank.matrix_.resize(static_cast<Eigen::Index>(categories.size()), spec.d);
  for (std::size_t i = 0; i < categories.size(); ++i) {
    bank.matrix_.row(static_cast<Eigen::Index>(i)) =
        encode_category(categories[i], spec).transpose();
  }
  if (include_background) {
    Rng rng(mix_seed(spec.seed, kBackgroundSalt));
    bank.background_ = rng.unit_vector(spec.d);
  }
  return bank;
}

PrototypeBank swap_vocabulary(const PrototypeBank& bank,
                              const std::vector<std::string>& new_categories,
                              const EncoderSpec& spec) {
  if (!bank.frozen()) throw std::runtime_error("swap_vocabulary requires a frozen bank");
  if (new_categories.empty()) throw std::invalid_argument("swap_vocabulary: empty vocabulary");
  if (spec.d != bank.dim()) throw std::invalid_argument("swap_vocabulary: dimension mismatch");
  PrototypeBank out = build_prototype_bank(new_categories, spec, false);
  out.background_ = bank.background();  // carried over unchanged
  out.freeze();
  return out;
}

std::string serialize_bank(const PrototypeBank& bank) {
  json header;
  header["categories"] = bank.categories();
  header["d"] = bank.dim();
  header["kind"] = encoder_kind_name(bank.spec().kind);
  header["seed"] = bank.spec().seed;
  header["template"] = bank.spec().prompt_template;
  header["background"] = bank.background().has_value();
  const std::string head = header.dump();

  std::string out;
  out.append("OVBANK01", 8);
  std::uint64_t len = head.size();
  char lenbuf[8];
  std::memcpy(lenbuf, &len, 8);
  out.append(lenbuf, 8);
  out += head;

  const Eigen::MatrixXd full = bank.full_matrix();
  std::vector<float> payload(static_cast<std::size_t>(full.rows()) *
                             static_cast<std::size_t>(full.cols()));
  for (Eigen::Index r = 0; r < full.rows(); ++r) {
    for (Eigen::Index c = 0; c < full.cols(); ++c) {
      payload[static_cast<std::size_t>(r) * full.cols() + c] =
          static_cast<float>(full(r, c));
    }
  }
  out.append(reinterpret_cast<const char*>(payload.data()), payload.size() * sizeof(float));
  return out;
}

void save_bank(const PrototypeBank& bank, const std::filesystem::path& path) {
  write_file(path, serialize_bank(bank));
}

PrototypeBank load_bank(const std::filesystem::path& path) {
  const std::string blob = read_file(path);
  if (blob.size() < 16 || blob.compare(0, 8, "OVBANK01") != 0) {
    throw std::runtime_error("not a prototype bank file: " + path.string());
  }
  std::uint64_t len = 0;
  std::memcpy(&len, blob.data() + 8, 8);
  if (16 + len > blob.size()) throw std::runtime_error("truncated bank header");
  const json header = json::parse(blob.substr(16, len));

  PrototypeBank bank;
  bank.spec_.kind = encoder_kind_from_name(header.at("kind").get<std::string>());
  bank.spec_.d = header.at("d").get<int>();
  bank.spec_.seed = header.at("seed").get<std::uint64_t>();
  bank.spec_.prompt_template = header.at("template").get<std::string>();
  bank.categories_ = header.at("categories").get<std::vector<std::string>>();
  const bool has_bg = header.at("background").get<bool>();

  const std::size_t rows = bank.categories_.size() + (has_bg ? 1 : 0);
  const std::size_t want = rows * static_cast<std::size_t>(bank.spec_.d) * sizeof(float);
  if (blob.size() - 16 - len != want) throw std::runtime_error("bank payload size mismatch");
  const char* p = blob.data() + 16 + len;
  Eigen::MatrixXd full(static_cast<Eigen::Index>(rows), bank.spec_.d);
  for (std::size_t r = 0; r < rows; ++r) {
    for (int c = 0; c < bank.spec_.d; ++c) {
      float f;
      std::memcpy(&f, p + (r * bank.spec_.d + c) * sizeof(float), sizeof(float));
      full(static_cast<Eigen::Index>(r), c) = static_cast<double>(f);
    }
  }
  bank.matrix_ = full.topRows(static_cast<Eigen::Index>(bank.categories_.size()));
  if (has_bg) bank.background_ = full.row(full.rows() - 1).transpose();
  bank.frozen_ = true;
  return bank;
}

std::string bank_digest(const PrototypeBank& bank) { return sha256_hex(serialize_bank(bank)); }

}  // namespace ovdet::textspace
