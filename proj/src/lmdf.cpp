#include "lamamba/lmdf.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace lamamba::lmdf {

static_assert(std::endian::native == std::endian::little, "LMDF I/O assumes a little-endian host");

void Container::add(std::string name, Tensor tensor) {
  if (contains(name)) throw FormatError("duplicate tensor name '" + name + "'");
  entries_.push_back({std::move(name), std::move(tensor)});
}

bool Container::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

const Tensor& Container::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.tensor;
  throw FormatError("tensor '" + name + "' not found in container");
}

namespace {

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <class T>
void put_at(std::vector<std::uint8_t>& out, std::size_t pos, T v) {
  std::memcpy(out.data() + pos, &v, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("truncated LMDF header");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::uint64_t align_up(std::uint64_t x) { return (x + kAlignment - 1) / kAlignment * kAlignment; }

std::size_t elem_size(DType d) { return d == DType::f32 ? 4 : 8; }

}  // namespace

std::vector<std::uint8_t> encode(const Container& c) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'L', 'M', 'D', 'F'});
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.size()));
  std::vector<std::size_t> offset_slots;
  for (const auto& e : c.entries()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.tensor.dtype()));
    if (e.tensor.rank() > 255) throw FormatError("tensor rank exceeds 255");
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.tensor.rank()));
    for (auto ext : e.tensor.shape()) {
      if (ext > 0xFFFFFFFFll) throw FormatError("tensor extent exceeds u32");
      put<std::uint32_t>(out, static_cast<std::uint32_t>(ext));
    }
    offset_slots.push_back(out.size());
    put<std::uint64_t>(out, 0);
  }
  for (std::size_t i = 0; i < c.size(); ++i) {
    const Tensor& t = c.entries()[i].tensor;
    const std::uint64_t off = align_up(out.size());
    out.resize(off, 0);
    put_at<std::uint64_t>(out, offset_slots[i], off);
    if (t.dtype() == DType::f32) {
      for (double v : t.data()) put<float>(out, static_cast<float>(v));
    } else {
      for (double v : t.data()) put<double>(out, v);
    }
  }
  return out;
}

Container decode(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(4) != "LMDF") throw FormatError("bad LMDF magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) throw FormatError("unsupported LMDF version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  Container c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.str(name_len);
    const auto dcode = r.get<std::uint8_t>();
    if (dcode > 1) throw FormatError("unknown dtype code " + std::to_string(dcode));
    const auto dtype = static_cast<DType>(dcode);
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& e : shape) e = r.get<std::uint32_t>();
    const auto off = r.get<std::uint64_t>();
    if (off % kAlignment != 0) throw FormatError("payload of '" + name + "' is not 64-byte aligned");
    const auto n = static_cast<std::uint64_t>(numel_of(shape));
    const std::size_t es = elem_size(dtype);
    if (off + n * es > bytes.size()) throw FormatError("payload of '" + name + "' is truncated");
    std::vector<double> data(n);
    const std::uint8_t* p = bytes.data() + off;
    for (std::uint64_t k = 0; k < n; ++k) {
      if (dtype == DType::f32) {
        float f;
        std::memcpy(&f, p + k * 4, 4);
        data[k] = f;
      } else {
        std::memcpy(&data[k], p + k * 8, 8);
      }
    }
    c.add(std::move(name), Tensor(std::move(shape), std::move(data), dtype));
  }
  return c;
}

void write_file(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode(c);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write failed for '" + path.string() + "'");
}

Container read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

std::string manifest(const Container& c) {
  const auto bytes = encode(c);
  // Re-read offsets from the encoded header so the manifest reports what is on disk.
  std::ostringstream os;
  os << "LMDF v" << kVersion << ", " << c.size() << " tensors\n";
  std::size_t pos = 12;
  for (const auto& e : c.entries()) {
    pos += 4 + e.name.size() + 2 + 4 * e.tensor.shape().size();
    std::uint64_t off;
    std::memcpy(&off, bytes.data() + pos, 8);
    pos += 8;
    os << e.name << "  " << (e.tensor.dtype() == DType::f32 ? "f32" : "f64") << "  "
       << shape_str(e.tensor.shape()) << "  @" << off << '\n';
  }
  return os.str();
}

}  // namespace lamamba::lmdf
