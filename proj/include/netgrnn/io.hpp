#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <Eigen/Dense>
#include <json.hpp>

namespace netgrnn::io {

/// 17 significant digits, round-trippable.
std::string format_double(double value);

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m);  // flat row-major
Eigen::MatrixXd matrix_from_json(const nlohmann::json& values, Eigen::Index rows,
                                 Eigen::Index cols);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& doc);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// FNV-1a, used to stamp artifacts with the config they came from.
std::uint64_t fnv1a(const std::string& text);
std::string hex64(std::uint64_t value);

}  // namespace netgrnn::io
