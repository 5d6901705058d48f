#include "phanes/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include "phanes/errors.hpp"

namespace phanes {
namespace {

void write_u64(std::ostream& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    const int c = in.get();
    if (c == EOF) throw CheckpointError("truncated checkpoint");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const auto n = read_u64(in);
  if (n > (1ULL << 32)) throw CheckpointError("corrupt checkpoint string length");
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw CheckpointError("truncated checkpoint");
  return s;
}

}  // namespace

void Checkpoint::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out << header << '\n';
  write_string(out, meta.dump());
  write_u64(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    write_string(out, name);
    write_u64(out, t.shape().size());
    for (int d : t.shape()) write_u64(out, static_cast<std::uint64_t>(d));
    for (double v : t.values()) write_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path, const std::string& expected_header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  Checkpoint ck;
  std::getline(in, ck.header);
  if (ck.header != expected_header)
    throw CheckpointError("checkpoint version mismatch: expected '" + expected_header + "', found '" +
                          ck.header.substr(0, 64) + "'");
  try {
    ck.meta = nlohmann::json::parse(read_string(in));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint metadata: ") + e.what());
  }
  const auto count = read_u64(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = read_string(in);
    const auto rank = read_u64(in);
    if (rank > 8) throw CheckpointError("corrupt tensor rank");
    nn::Shape shape;
    for (std::uint64_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(read_u64(in)));
    nn::Tensor<double> t(shape);
    for (auto& v : t.values()) v = std::bit_cast<double>(read_u64(in));
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  return ck;
}

void Checkpoint::throw_missing(const std::string& name) { throw CheckpointError("checkpoint lacks tensor " + name); }

void Checkpoint::throw_shape(const std::string& name) {
  throw CheckpointError("checkpoint tensor " + name + " has the wrong shape");
}

}  // namespace phanes
