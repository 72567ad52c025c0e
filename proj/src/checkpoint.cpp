#include "seqseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "seqseg/errors.hpp"

namespace seqseg {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool get(std::istream& is, T& v) {
  return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), sizeof(T)));
}

std::vector<double> encode_fcn(const FcnConfig& c) {
  std::vector<double> v{static_cast<double>(c.num_classes),
                        static_cast<double>(c.in_channels),
                        static_cast<double>(c.stem_channels),
                        static_cast<double>(c.stem_kernel),
                        static_cast<double>(c.input_h),
                        static_cast<double>(c.input_w),
                        static_cast<double>(c.stages.size())};
  for (const auto& s : c.stages) {
    v.push_back(s.blocks);
    v.push_back(s.channels);
  }
  v.push_back(static_cast<double>(c.skip_taps.size()));
  for (int t : c.skip_taps) v.push_back(t);
  return v;
}

FcnConfig decode_fcn(const std::vector<double>& v) {
  auto at = [&](std::size_t i) {
    if (i >= v.size()) throw CompatibilityError("checkpoint: truncated meta.fcn");
    return static_cast<int>(v[i]);
  };
  FcnConfig c;
  c.num_classes = at(0);
  c.in_channels = at(1);
  c.stem_channels = at(2);
  c.stem_kernel = at(3);
  c.input_h = at(4);
  c.input_w = at(5);
  const int stages = at(6);
  std::size_t i = 7;
  c.stages.clear();
  for (int s = 0; s < stages; ++s, i += 2) c.stages.push_back({at(i), at(i + 1)});
  const int taps = at(i++);
  c.skip_taps.clear();
  for (int t = 0; t < taps; ++t) c.skip_taps.push_back(at(i++));
  return c;
}

std::vector<double> encode_rnn(const RnnConfig& c) {
  return {static_cast<double>(c.cell == CellKind::convlstm),
          static_cast<double>(c.layers),
          static_cast<double>(c.kernel_h),
          static_cast<double>(c.kernel_w),
          static_cast<double>(c.hidden),
          static_cast<double>(c.unroll),
          static_cast<double>(c.input_channels),
          static_cast<double>(c.output_channels),
          static_cast<double>(c.peephole == PeepholeMode::per_element),
          static_cast<double>(c.state_h),
          static_cast<double>(c.state_w),
          static_cast<double>(c.output_peek == OutputGatePeek::old_state),
          static_cast<double>(c.merge == HeadMerge::add),
          c.forget_bias};
}

RnnConfig decode_rnn(const std::vector<double>& v) {
  if (v.size() != 14) throw CompatibilityError("checkpoint: malformed meta.rnn");
  RnnConfig c;
  c.cell = v[0] != 0.0 ? CellKind::convlstm : CellKind::simple;
  c.layers = static_cast<int>(v[1]);
  c.kernel_h = static_cast<int>(v[2]);
  c.kernel_w = static_cast<int>(v[3]);
  c.hidden = static_cast<int>(v[4]);
  c.unroll = static_cast<int>(v[5]);
  c.input_channels = static_cast<int>(v[6]);
  c.output_channels = static_cast<int>(v[7]);
  c.peephole = v[8] != 0.0 ? PeepholeMode::per_element : PeepholeMode::per_channel;
  c.state_h = static_cast<int>(v[9]);
  c.state_w = static_cast<int>(v[10]);
  c.output_peek = v[11] != 0.0 ? OutputGatePeek::old_state : OutputGatePeek::new_state;
  c.merge = v[12] != 0.0 ? HeadMerge::add : HeadMerge::replace;
  c.forget_bias = v[13];
  return c;
}

NamedTensor meta_tensor(const std::string& name, std::vector<double> values) {
  NamedTensor t;
  t.name = name;
  t.dims = {static_cast<std::int32_t>(values.size()), 1, 1, 1};
  t.values = std::move(values);
  return t;
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path,
                       const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write(kCheckpointMagic, 8);
  for (const auto& t : tensors) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    for (std::int32_t d : t.dims) put<std::int32_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.values.data()),
             static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  }
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

std::vector<NamedTensor> read_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CompatibilityError("not a SEQSEG01 checkpoint: " + path.string());
  std::vector<NamedTensor> out;
  std::uint32_t len = 0;
  while (get(is, len)) {
    if (len > (1u << 16))
      throw CompatibilityError("checkpoint: implausible name length in " +
                               path.string());
    NamedTensor t;
    t.name.resize(len);
    std::int64_t count = 1;
    bool ok = static_cast<bool>(is.read(t.name.data(), len));
    for (auto& d : t.dims) {
      ok = ok && get(is, d);
      if (d < 0) ok = false;
      count *= d;
    }
    if (!ok) throw CompatibilityError("checkpoint: truncated record in " + path.string());
    t.values.resize(static_cast<std::size_t>(count));
    if (!is.read(reinterpret_cast<char*>(t.values.data()),
                 static_cast<std::streamsize>(count * sizeof(double))))
      throw CompatibilityError("checkpoint: truncated values for '" + t.name +
                               "' in " + path.string());
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<NamedTensor> snapshot(const std::vector<ParamView>& views) {
  std::vector<NamedTensor> out;
  out.reserve(views.size());
  for (const auto& v : views)
    out.push_back({v.name, v.dims, {v.values.begin(), v.values.end()}});
  return out;
}

void restore(const std::vector<ParamView>& views,
             const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  for (const auto& v : views) {
    auto it = by_name.find(v.name);
    if (it == by_name.end())
      throw CompatibilityError("checkpoint lacks parameter '" + v.name + "'");
    if (it->second->dims != v.dims)
      throw CompatibilityError("checkpoint parameter '" + v.name +
                               "' has different dims");
    std::copy(it->second->values.begin(), it->second->values.end(),
              v.values.begin());
  }
}

void save_model(const std::filesystem::path& path, SegModel& model) {
  std::vector<NamedTensor> tensors;
  tensors.push_back(meta_tensor("meta.fcn", encode_fcn(model.fcn.config)));
  if (model.head)
    tensors.push_back(meta_tensor("meta.rnn", encode_rnn(model.head->config)));
  for (auto& t : snapshot(model.fcn.views())) tensors.push_back(std::move(t));
  if (model.head)
    for (auto& t : snapshot(model.head->views())) tensors.push_back(std::move(t));
  write_tensor_file(path, tensors);
}

SegModel load_model(const std::filesystem::path& path) {
  const auto tensors = read_tensor_file(path);
  const NamedTensor* fcn_meta = nullptr;
  const NamedTensor* rnn_meta = nullptr;
  for (const auto& t : tensors) {
    if (t.name == "meta.fcn") fcn_meta = &t;
    if (t.name == "meta.rnn") rnn_meta = &t;
  }
  if (!fcn_meta)
    throw CompatibilityError("checkpoint has no FCN: " + path.string());
  SegModel model;
  FcnConfig fcfg = decode_fcn(fcn_meta->values);
  try {
    model.fcn = build_fcn(fcfg, 0);
  } catch (const ConfigError& e) {
    throw CompatibilityError(std::string("checkpoint FCN config invalid: ") + e.what());
  }
  restore(model.fcn.views(), tensors);
  if (rnn_meta) {
    model.head = build_head(decode_rnn(rnn_meta->values), 0);
    restore(model.head->views(), tensors);
  }
  return model;
}

}  // namespace seqseg
