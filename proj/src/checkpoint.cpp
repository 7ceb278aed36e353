#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "dsp/compile.hpp"
#include "dsp/errors.hpp"

namespace dsp {

namespace {

// Checkpoint layout (little-endian):
//   magic "DSPC", version u32, flags u32 (bit0 compiled, bit1 group logits),
//   metadata block (u32 count; per entry u32-length-prefixed UTF-8 key/value),
//   u32 class count, input shape (u32 rank, u32 extents[]),
//   layer table (u32 count; per layer type tag u8 + payload),
//   group-logits section when flags bit1 is set.
constexpr char kMagic[4] = {'D', 'S', 'P', 'C'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kFlagCompiled = 1u << 0;
constexpr std::uint32_t kFlagLogits = 1u << 1;

enum LayerTag : std::uint8_t {
    kTagConv = 1,
    kTagBatchNorm = 2,
    kTagRelu = 3,
    kTagMaxPool = 4,
    kTagFlatten = 5,
    kTagLinear = 6,
    kTagGroupedConv = 7,
};

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        u64(bits);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf_.append(s);
    }
    void f64_array(const std::vector<double>& v) {
        u64(v.size());
        for (const double x : v) f64(x);
    }
    void index_array(const std::vector<std::int64_t>& v) {
        u32(static_cast<std::uint32_t>(v.size()));
        for (const auto x : v) u32(static_cast<std::uint32_t>(x));
    }
    std::string take() { return std::move(buf_); }

private:
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(const std::string& buf) : buf_(buf) {}

    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_++])) << (8 * i);
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }
    std::string str() {
        const auto len = u32();
        need(len);
        std::string s = buf_.substr(pos_, len);
        pos_ += len;
        return s;
    }
    std::vector<double> f64_array() {
        const auto len = u64();
        need(len * 8);
        std::vector<double> v(static_cast<std::size_t>(len));
        for (auto& x : v) x = f64();
        return v;
    }
    std::vector<std::int64_t> index_array() {
        const auto len = u32();
        std::vector<std::int64_t> v(len);
        for (auto& x : v) x = u32();
        return v;
    }
    bool done() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) {
        if (pos_ + n > buf_.size()) throw ParseError("checkpoint truncated");
    }
    const std::string& buf_;
    std::size_t pos_ = 0;
};

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_metadata(ByteWriter& w, const std::map<std::string, std::string>& meta) {
    w.u32(static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
        w.str(k);
        w.str(v);
    }
}

std::map<std::string, std::string> read_metadata(ByteReader& r) {
    std::map<std::string, std::string> meta;
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string k = r.str();
        meta[k] = r.str();
    }
    return meta;
}

void write_shape(ByteWriter& w, const Shape& shape) {
    w.u32(static_cast<std::uint32_t>(shape.size()));
    for (const auto d : shape) w.u32(static_cast<std::uint32_t>(d));
}

Shape read_shape(ByteReader& r) {
    const auto rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    return shape;
}

void write_logits_section(ByteWriter& w, const std::vector<GroupParameters>& logits) {
    w.u32(static_cast<std::uint32_t>(logits.size()));
    for (const auto& gp : logits) {
        w.u32(static_cast<std::uint32_t>(gp.layer_index));
        w.u32(static_cast<std::uint32_t>(gp.logits.dim(0)));
        w.u32(static_cast<std::uint32_t>(gp.logits.dim(1)));
        w.f64(gp.tau);
        for (const double v : gp.logits.data()) w.f64(v);
    }
}

std::vector<GroupParameters> read_logits_section(ByteReader& r) {
    std::vector<GroupParameters> out;
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        GroupParameters gp;
        gp.layer_index = r.u32();
        const std::int64_t rows = r.u32();
        const std::int64_t cols = r.u32();
        gp.tau = r.f64();
        gp.group_count = cols;
        std::vector<double> data(static_cast<std::size_t>(rows * cols));
        for (auto& v : data) v = r.f64();
        gp.logits = Tensor::from_data({rows, cols}, std::move(data), true);
        out.push_back(std::move(gp));
    }
    return out;
}

} // namespace

std::string serialize_dense(const Network& net, const std::vector<GroupParameters>& logits,
                            const std::map<std::string, std::string>& metadata) {
    ByteWriter w;
    w.u8(kMagic[0]);
    w.u8(kMagic[1]);
    w.u8(kMagic[2]);
    w.u8(kMagic[3]);
    w.u32(kVersion);
    w.u32(logits.empty() ? 0u : kFlagLogits);
    write_metadata(w, metadata);
    w.u32(static_cast<std::uint32_t>(net.spec.class_count));
    write_shape(w, net.spec.input_shape);
    w.u32(static_cast<std::uint32_t>(net.spec.layers.size()));
    for (std::size_t li = 0; li < net.spec.layers.size(); ++li) {
        const LayerState& st = net.state[li];
        if (const auto* conv = std::get_if<ConvLayerSpec>(&net.spec.layers[li])) {
            w.u8(kTagConv);
            w.u32(static_cast<std::uint32_t>(conv->out_channels));
            w.u32(static_cast<std::uint32_t>(conv->in_channels));
            w.u32(static_cast<std::uint32_t>(conv->kernel_h));
            w.u32(static_cast<std::uint32_t>(conv->kernel_w));
            w.u32(static_cast<std::uint32_t>(conv->stride));
            w.u32(static_cast<std::uint32_t>(conv->padding));
            w.u8(conv->has_bias ? 1 : 0);
            w.u8(conv->grouped ? 1 : 0);
            w.f64_array(st.weight.data());
            if (conv->has_bias) w.f64_array(st.bias.data());
        } else if (const auto* bn = std::get_if<BatchNormLayerSpec>(&net.spec.layers[li])) {
            w.u8(kTagBatchNorm);
            w.u32(static_cast<std::uint32_t>(bn->channels));
            w.f64_array(st.gamma.data());
            w.f64_array(st.beta.data());
            w.f64_array(st.running_mean);
            w.f64_array(st.running_var);
        } else if (std::get_if<ReluLayerSpec>(&net.spec.layers[li])) {
            w.u8(kTagRelu);
        } else if (const auto* pool = std::get_if<MaxPoolLayerSpec>(&net.spec.layers[li])) {
            w.u8(kTagMaxPool);
            w.u32(static_cast<std::uint32_t>(pool->kernel));
            w.u32(static_cast<std::uint32_t>(pool->stride));
        } else if (std::get_if<FlattenLayerSpec>(&net.spec.layers[li])) {
            w.u8(kTagFlatten);
        } else if (const auto* lin = std::get_if<LinearLayerSpec>(&net.spec.layers[li])) {
            w.u8(kTagLinear);
            w.u32(static_cast<std::uint32_t>(lin->out_features));
            w.u32(static_cast<std::uint32_t>(lin->in_features));
            w.u8(lin->has_bias ? 1 : 0);
            w.f64_array(st.weight.data());
            if (lin->has_bias) w.f64_array(st.bias.data());
        }
    }
    if (!logits.empty()) write_logits_section(w, logits);
    return w.take();
}

std::string serialize_compiled(const CompiledModel& model) {
    ByteWriter w;
    w.u8(kMagic[0]);
    w.u8(kMagic[1]);
    w.u8(kMagic[2]);
    w.u8(kMagic[3]);
    w.u32(kVersion);
    w.u32(kFlagCompiled);
    std::map<std::string, std::string> meta = model.meta.extra;
    meta["beta"] = fmt_double(model.meta.beta);
    meta["lambda"] = fmt_double(model.meta.lambda);
    meta["groups"] = std::to_string(model.meta.groups);
    meta["seed"] = std::to_string(model.meta.seed);
    meta["params"] = std::to_string(model.meta.params);
    meta["flops"] = std::to_string(model.meta.flops);
    meta["dense_params"] = std::to_string(model.meta.dense_params);
    meta["dense_flops"] = std::to_string(model.meta.dense_flops);
    write_metadata(w, meta);
    w.u32(static_cast<std::uint32_t>(model.class_count));
    write_shape(w, model.input_shape);
    w.u32(static_cast<std::uint32_t>(model.layers.size()));
    for (const auto& layer : model.layers) {
        if (const auto* conv = std::get_if<CompiledConv>(&layer)) {
            w.u8(kTagConv);
            w.u32(static_cast<std::uint32_t>(conv->weight.dim(0)));
            w.u32(static_cast<std::uint32_t>(conv->weight.dim(1)));
            w.u32(static_cast<std::uint32_t>(conv->weight.dim(2)));
            w.u32(static_cast<std::uint32_t>(conv->weight.dim(3)));
            w.u32(static_cast<std::uint32_t>(conv->stride));
            w.u32(static_cast<std::uint32_t>(conv->padding));
            w.u8(conv->bias.defined() ? 1 : 0);
            w.u8(0);
            w.index_array(conv->filters);
            w.f64_array(conv->weight.data());
            if (conv->bias.defined()) w.f64_array(conv->bias.data());
        } else if (const auto* g = std::get_if<CompiledGroupedConv>(&layer)) {
            w.u8(kTagGroupedConv);
            w.u32(static_cast<std::uint32_t>(g->stride));
            w.u32(static_cast<std::uint32_t>(g->padding));
            w.u32(static_cast<std::uint32_t>(g->weights[0].dim(2)));
            w.u32(static_cast<std::uint32_t>(g->weights[0].dim(3)));
            w.u16(static_cast<std::uint16_t>(g->weights.size()));
            for (std::size_t i = 0; i < g->weights.size(); ++i) {
                w.index_array(g->filters[i]);
                w.index_array(g->gather[i]);
                w.f64_array(g->weights[i].data());
            }
        } else if (const auto* bn = std::get_if<CompiledBatchNorm>(&layer)) {
            w.u8(kTagBatchNorm);
            w.u32(static_cast<std::uint32_t>(bn->gamma.numel()));
            w.f64_array(bn->gamma.data());
            w.f64_array(bn->beta.data());
            w.f64_array(bn->running_mean);
            w.f64_array(bn->running_var);
        } else if (std::get_if<CompiledRelu>(&layer)) {
            w.u8(kTagRelu);
        } else if (const auto* pool = std::get_if<CompiledMaxPool>(&layer)) {
            w.u8(kTagMaxPool);
            w.u32(static_cast<std::uint32_t>(pool->kernel));
            w.u32(static_cast<std::uint32_t>(pool->stride));
        } else if (std::get_if<CompiledFlatten>(&layer)) {
            w.u8(kTagFlatten);
        } else if (const auto* lin = std::get_if<CompiledLinear>(&layer)) {
            w.u8(kTagLinear);
            w.u32(static_cast<std::uint32_t>(lin->weight.dim(0)));
            w.u32(static_cast<std::uint32_t>(lin->weight.dim(1)));
            w.u8(lin->bias.defined() ? 1 : 0);
            w.f64_array(lin->weight.data());
            if (lin->bias.defined()) w.f64_array(lin->bias.data());
        }
    }
    return w.take();
}

namespace {

std::int64_t meta_int(const std::map<std::string, std::string>& meta, const std::string& key) {
    const auto it = meta.find(key);
    return it == meta.end() ? 0 : std::strtoll(it->second.c_str(), nullptr, 10);
}

double meta_double(const std::map<std::string, std::string>& meta, const std::string& key) {
    const auto it = meta.find(key);
    return it == meta.end() ? 0.0 : std::strtod(it->second.c_str(), nullptr);
}

} // namespace

Checkpoint deserialize_checkpoint(const std::string& bytes) {
    ByteReader r(bytes);
    char magic[4];
    for (char& c : magic) c = static_cast<char>(r.u8());
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw ParseError("checkpoint: bad magic, expected 'DSPC'");
    }
    const auto version = r.u32();
    if (version != kVersion) {
        throw ParseError("checkpoint: unsupported format version " + std::to_string(version) +
                         ", expected " + std::to_string(kVersion));
    }
    const auto flags = r.u32();
    Checkpoint ckpt;
    ckpt.metadata = read_metadata(r);
    const std::int64_t class_count = r.u32();
    const Shape input_shape = read_shape(r);
    const auto layer_count = r.u32();

    if (flags & kFlagCompiled) {
        ckpt.compiled = true;
        CompiledModel& model = ckpt.model;
        model.class_count = class_count;
        model.input_shape = input_shape;
        for (std::uint32_t li = 0; li < layer_count; ++li) {
            const auto tag = r.u8();
            switch (tag) {
                case kTagConv: {
                    CompiledConv conv;
                    const std::int64_t cout = r.u32(), cin = r.u32(), kh = r.u32(), kw = r.u32();
                    conv.stride = r.u32();
                    conv.padding = r.u32();
                    const bool has_bias = r.u8() != 0;
                    r.u8(); // grouped flag unused in compiled form
                    conv.filters = r.index_array();
                    conv.weight = Tensor::from_data({cout, cin, kh, kw}, r.f64_array(), true);
                    if (conv.weight.numel() != cout * cin * kh * kw) {
                        throw ParseError("checkpoint: conv payload size mismatch");
                    }
                    if (has_bias) conv.bias = Tensor::from_data({cout}, r.f64_array(), true);
                    model.layers.emplace_back(std::move(conv));
                    break;
                }
                case kTagGroupedConv: {
                    CompiledGroupedConv g;
                    g.stride = r.u32();
                    g.padding = r.u32();
                    const std::int64_t kh = r.u32(), kw = r.u32();
                    const auto groups = r.u16();
                    for (std::uint16_t gi = 0; gi < groups; ++gi) {
                        g.filters.push_back(r.index_array());
                        g.gather.push_back(r.index_array());
                        auto payload = r.f64_array();
                        const std::int64_t nf = static_cast<std::int64_t>(g.filters.back().size());
                        const std::int64_t ng = static_cast<std::int64_t>(g.gather.back().size());
                        if (static_cast<std::int64_t>(payload.size()) != nf * ng * kh * kw) {
                            throw ParseError("checkpoint: grouped conv payload size mismatch");
                        }
                        g.weights.push_back(
                            Tensor::from_data({nf, ng, kh, kw}, std::move(payload), true));
                    }
                    model.layers.emplace_back(std::move(g));
                    break;
                }
                case kTagBatchNorm: {
                    CompiledBatchNorm bn;
                    const std::int64_t c = r.u32();
                    bn.gamma = Tensor::from_data({c}, r.f64_array(), true);
                    bn.beta = Tensor::from_data({c}, r.f64_array(), true);
                    bn.running_mean = r.f64_array();
                    bn.running_var = r.f64_array();
                    model.layers.emplace_back(std::move(bn));
                    break;
                }
                case kTagRelu:
                    model.layers.emplace_back(CompiledRelu{});
                    break;
                case kTagMaxPool: {
                    CompiledMaxPool pool;
                    pool.kernel = r.u32();
                    pool.stride = r.u32();
                    model.layers.emplace_back(pool);
                    break;
                }
                case kTagFlatten:
                    model.layers.emplace_back(CompiledFlatten{});
                    break;
                case kTagLinear: {
                    CompiledLinear lin;
                    const std::int64_t out = r.u32(), in = r.u32();
                    const bool has_bias = r.u8() != 0;
                    lin.weight = Tensor::from_data({out, in}, r.f64_array(), true);
                    if (has_bias) lin.bias = Tensor::from_data({out}, r.f64_array(), true);
                    model.layers.emplace_back(std::move(lin));
                    break;
                }
                default:
                    throw ParseError("checkpoint: unknown layer tag " + std::to_string(tag));
            }
        }
        model.meta.beta = meta_double(ckpt.metadata, "beta");
        model.meta.lambda = meta_double(ckpt.metadata, "lambda");
        model.meta.groups = meta_int(ckpt.metadata, "groups");
        model.meta.seed = static_cast<std::uint64_t>(meta_int(ckpt.metadata, "seed"));
        model.meta.params = meta_int(ckpt.metadata, "params");
        model.meta.flops = meta_int(ckpt.metadata, "flops");
        model.meta.dense_params = meta_int(ckpt.metadata, "dense_params");
        model.meta.dense_flops = meta_int(ckpt.metadata, "dense_flops");
        for (const auto& [k, v] : ckpt.metadata) {
            if (k != "beta" && k != "lambda" && k != "groups" && k != "seed" && k != "params" &&
                k != "flops" && k != "dense_params" && k != "dense_flops") {
                model.meta.extra[k] = v;
            }
        }
        // self-consistency: stored counts must equal a recount from structure
        const auto recount = count_pruned_params_flops(model);
        if (recount.params != model.meta.params || recount.flops != model.meta.flops) {
            throw ParseError("checkpoint: stored parameter/flop counts disagree with structure (" +
                             std::to_string(model.meta.params) + "/" +
                             std::to_string(model.meta.flops) + " stored vs " +
                             std::to_string(recount.params) + "/" + std::to_string(recount.flops) +
                             " recounted)");
        }
    } else {
        Network& net = ckpt.dense;
        net.spec.class_count = class_count;
        net.spec.input_shape = input_shape;
        for (std::uint32_t li = 0; li < layer_count; ++li) {
            const auto tag = r.u8();
            LayerState st;
            switch (tag) {
                case kTagConv: {
                    ConvLayerSpec conv;
                    conv.out_channels = r.u32();
                    conv.in_channels = r.u32();
                    conv.kernel_h = r.u32();
                    conv.kernel_w = r.u32();
                    conv.stride = r.u32();
                    conv.padding = r.u32();
                    conv.has_bias = r.u8() != 0;
                    conv.grouped = r.u8() != 0;
                    auto payload = r.f64_array();
                    if (static_cast<std::int64_t>(payload.size()) !=
                        conv.out_channels * conv.in_channels * conv.kernel_h * conv.kernel_w) {
                        throw ParseError("checkpoint: conv payload size mismatch");
                    }
                    st.weight = Tensor::from_data(
                        {conv.out_channels, conv.in_channels, conv.kernel_h, conv.kernel_w},
                        std::move(payload), true);
                    if (conv.has_bias) {
                        st.bias = Tensor::from_data({conv.out_channels}, r.f64_array(), true);
                    }
                    net.spec.layers.emplace_back(conv);
                    break;
                }
                case kTagBatchNorm: {
                    BatchNormLayerSpec bn;
                    bn.channels = r.u32();
                    st.gamma = Tensor::from_data({bn.channels}, r.f64_array(), true);
                    st.beta = Tensor::from_data({bn.channels}, r.f64_array(), true);
                    st.running_mean = r.f64_array();
                    st.running_var = r.f64_array();
                    net.spec.layers.emplace_back(bn);
                    break;
                }
                case kTagRelu:
                    net.spec.layers.emplace_back(ReluLayerSpec{});
                    break;
                case kTagMaxPool: {
                    MaxPoolLayerSpec pool;
                    pool.kernel = r.u32();
                    pool.stride = r.u32();
                    net.spec.layers.emplace_back(pool);
                    break;
                }
                case kTagFlatten:
                    net.spec.layers.emplace_back(FlattenLayerSpec{});
                    break;
                case kTagLinear: {
                    LinearLayerSpec lin;
                    lin.out_features = r.u32();
                    lin.in_features = r.u32();
                    lin.has_bias = r.u8() != 0;
                    st.weight =
                        Tensor::from_data({lin.out_features, lin.in_features}, r.f64_array(), true);
                    if (lin.has_bias) {
                        st.bias = Tensor::from_data({lin.out_features}, r.f64_array(), true);
                    }
                    net.spec.layers.emplace_back(lin);
                    break;
                }
                default:
                    throw ParseError("checkpoint: unknown layer tag " + std::to_string(tag));
            }
            net.state.push_back(std::move(st));
        }
        if (flags & kFlagLogits) ckpt.logits = read_logits_section(r);
        net.spec.validate();
    }
    if (!r.done()) throw ParseError("checkpoint: trailing bytes after payload");
    return ckpt;
}

void save_checkpoint_file(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw DataError("failed writing " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw DataError("cannot move " + tmp + " into place");
    }
}

std::string read_binary_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

} // namespace dsp
