#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ovdet::textspace {

enum class EncoderKind { Compositional, Hashed, External };

std::string encoder_kind_name(EncoderKind k);
EncoderKind encoder_kind_from_name(const std::string& name);

struct EncoderSpec {
  EncoderKind kind = EncoderKind::Compositional;
  int d = 64;
  std::uint64_t seed = 0;
  std::string prompt_template = "a photo of a {name}";
};

/// Adapter contract for a pre-trained frozen language encoder: one call,
/// prompt string in, raw (not necessarily normalized) vector out.
using ExternalEncoderFn = std::function<Eigen::VectorXd(const std::string&)>;
void set_external_encoder(ExternalEncoderFn fn);
void clear_external_encoder();

/// Deterministic unit embedding of a single token.
Eigen::VectorXd token_embedding(const std::string& token, int d, std::uint64_t seed);

Eigen::VectorXd encode_category(const std::string& name, const EncoderSpec& spec);

class PrototypeBank {
 public:
  PrototypeBank() = default;

  const std::vector<std::string>& categories() const { return categories_; }
  const Eigen::MatrixXd& matrix() const { return matrix_; }
  const std::optional<Eigen::VectorXd>& background() const { return background_; }
  bool frozen() const { return frozen_; }
  const EncoderSpec& spec() const { return spec_; }
  int dim() const { return static_cast<int>(matrix_.cols()); }
  std::size_t size() const { return categories_.size(); }

  /// Category rows plus the background row (last), when present.
  Eigen::MatrixXd full_matrix() const;

  int index_of(const std::string& category) const;  // -1 if absent

  void freeze() { frozen_ = true; }
  void set_background(const Eigen::VectorXd& row);

 private:
  friend PrototypeBank build_prototype_bank(const std::vector<std::string>&,
                                            const EncoderSpec&, bool);
  friend PrototypeBank swap_vocabulary(const PrototypeBank&,
                                       const std::vector<std::string>&,
                                       const EncoderSpec&);
  friend PrototypeBank load_bank(const std::filesystem::path&);

  std::vector<std::string> categories_;
  Eigen::MatrixXd matrix_;  // |O| x d, unit-norm rows
  std::optional<Eigen::VectorXd> background_;
  bool frozen_ = false;
  EncoderSpec spec_;
};

PrototypeBank build_prototype_bank(const std::vector<std::string>& categories,
                                   const EncoderSpec& spec, bool include_background);

/// Re-targets a frozen bank at a new vocabulary. The background row carries
/// over unchanged; model weights are untouched by construction.
PrototypeBank swap_vocabulary(const PrototypeBank& bank,
                              const std::vector<std::string>& new_categories,
                              const EncoderSpec& spec);

std::string serialize_bank(const PrototypeBank& bank);
void save_bank(const PrototypeBank& bank, const std::filesystem::path& path);
PrototypeBank load_bank(const std::filesystem::path& path);
std::string bank_digest(const PrototypeBank& bank);

}  // namespace ovdet::textspace
