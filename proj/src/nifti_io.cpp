#include "dtalign/nifti_io.hpp"

#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace dtalign {

namespace {

constexpr int kHeaderSize = 348;
constexpr int kExtensionCode = 6;  // NIFTI_ECODE_COMMENT

constexpr short kIntentNone = 0;
constexpr short kIntentLabel = 1002;
constexpr short kIntentSymMatrix = 1005;
constexpr short kIntentDispVect = 1006;
constexpr short kIntentVector = 1007;

constexpr short kDtUint8 = 2, kDtInt16 = 4, kDtInt32 = 8, kDtFloat32 = 16, kDtFloat64 = 64, kDtUint16 = 512;

const char* kCanonicalOrder = "xx,xy,yy,xz,yz,zz";

template <class T>
T get(const std::vector<char>& buf, std::size_t off) {
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    return v;
}

template <class T>
void put(std::vector<char>& buf, std::size_t off, T v) {
    std::memcpy(buf.data() + off, &v, sizeof(T));
}

// Shortest decimal that round-trips the stored float, read back as double, so
// a header value of 1.2f yields exactly 1.2.
double float_to_decimal(float f) {
    char text[64];
    auto res = std::to_chars(text, text + sizeof(text), f);
    double d = 0.0;
    std::from_chars(text, res.ptr, d);
    return d;
}

std::vector<double> json_vec3(const nlohmann::json& j) {
    std::vector<double> v = j.get<std::vector<double>>();
    if (v.size() != 3) fail(ErrorKind::Format, "extension vector must have 3 entries");
    return v;
}

}  // namespace

std::array<int, 6> tensor_order_permutation(const std::string& order) {
    static const std::array<std::string, 6> canonical{"xx", "xy", "yy", "xz", "yz", "zz"};
    std::vector<std::string> parts;
    std::stringstream ss(order);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::string t;
        for (char c : item)
            if (!std::isspace(static_cast<unsigned char>(c))) t += static_cast<char>(std::tolower(c));
        if (t.size() == 2 && t[0] > t[1]) std::swap(t[0], t[1]);  // "yx" == "xy"
        parts.push_back(t);
    }
    if (parts.size() != 6) fail(ErrorKind::Format, "tensor order must list 6 components: '" + order + "'");
    std::array<int, 6> perm{};
    for (int q = 0; q < 6; ++q) {
        auto it = std::find(parts.begin(), parts.end(), canonical[q]);
        if (it == parts.end()) fail(ErrorKind::Format, "tensor order missing component " + canonical[q]);
        perm[q] = static_cast<int>(it - parts.begin());
    }
    return perm;
}

RawVolume read_raw(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IO, "cannot open " + path.string());
    std::vector<char> file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (file.size() < kHeaderSize) fail(ErrorKind::Format, path.string() + ": truncated header");
    if (get<int>(file, 0) != kHeaderSize)
        fail(ErrorKind::Format, path.string() + ": not a little-endian NIfTI-1 file");
    if (std::memcmp(file.data() + 344, "n+1", 4) != 0)
        fail(ErrorKind::Format, path.string() + ": missing n+1 magic");

    const short ndim = get<short>(file, 40);
    if (ndim < 1 || ndim > 7) fail(ErrorKind::Format, path.string() + ": bad dim[0]");
    std::array<long, 8> dim{};
    for (int a = 0; a < 8; ++a) dim[a] = a <= ndim ? get<short>(file, 40 + 2 * a) : 1;
    for (int a = 1; a <= ndim; ++a)
        if (dim[a] < 1) fail(ErrorKind::Validation, path.string() + ": non-positive dimension");
    const short intent = get<short>(file, 68);
    const short datatype = get<short>(file, 70);
    const float vox_offset = get<float>(file, 108);
    float slope = get<float>(file, 112);
    const float inter = get<float>(file, 116);
    if (slope == 0.0f) slope = 1.0f;

    RawVolume raw;
    for (int a = 0; a < 3; ++a) {
        raw.meta.dims[a] = static_cast<int>(dim[a + 1]);
        raw.meta.spacing[a] = float_to_decimal(get<float>(file, 80 + 4 * a));
    }
    if (get<short>(file, 254) > 0) {
        for (int a = 0; a < 3; ++a) raw.meta.origin[a] = float_to_decimal(get<float>(file, 280 + 16 * a + 12));
    } else {
        for (int a = 0; a < 3; ++a) raw.meta.origin[a] = float_to_decimal(get<float>(file, 268 + 4 * a));
    }

    std::string tensor_order = kCanonicalOrder;
    bool channel_fastest = false;
    // Extensions: 4-byte extender, then (esize, ecode, payload) records.
    if (file.size() >= kHeaderSize + 4 && file[kHeaderSize] != 0) {
        std::size_t off = kHeaderSize + 4;
        while (off + 8 <= static_cast<std::size_t>(vox_offset)) {
            const int esize = get<int>(file, off);
            const int ecode = get<int>(file, off + 4);
            if (esize < 8 || off + esize > file.size()) fail(ErrorKind::Format, path.string() + ": bad extension");
            if (ecode == kExtensionCode) {
                std::string text(file.data() + off + 8, file.data() + off + esize);
                text = text.c_str();  // strip zero padding
                auto j = nlohmann::json::parse(text, nullptr, false);
                if (!j.is_discarded() && j.contains("dtalign")) {
                    const auto& e = j["dtalign"];
                    if (e.contains("spacing")) {
                        auto s = json_vec3(e["spacing"]);
                        raw.meta.spacing = Vec3(s[0], s[1], s[2]);
                    }
                    if (e.contains("origin")) {
                        auto o = json_vec3(e["origin"]);
                        raw.meta.origin = Vec3(o[0], o[1], o[2]);
                    }
                    if (e.contains("tensor_order")) tensor_order = e["tensor_order"].get<std::string>();
                    if (e.contains("layout")) channel_fastest = e["layout"].get<std::string>() == "channel-fastest";
                    if (e.contains("labels"))
                        for (auto& [k, v] : e["labels"].items()) raw.label_names[std::stoi(k)] = v.get<std::string>();
                }
            }
            off += esize;
        }
    }
    raw.meta.validate();

    long channels = 1;
    for (int a = 4; a <= ndim; ++a) channels *= dim[a];
    raw.channels = static_cast<int>(channels);
    if (intent == kIntentSymMatrix || (intent == kIntentNone && ndim == 5 && channels == 6))
        raw.kind = VolumeKind::Tensor;
    else if (intent == kIntentDispVect || intent == kIntentVector)
        raw.kind = VolumeKind::Vector;
    else if (intent == kIntentLabel)
        raw.kind = VolumeKind::Label;
    else if (channels > 1)
        raw.kind = VolumeKind::Series;
    else
        raw.kind = (datatype == kDtFloat32 || datatype == kDtFloat64) ? VolumeKind::Scalar : VolumeKind::Label;
    if (raw.kind == VolumeKind::Tensor && channels != 6)
        fail(ErrorKind::Format, path.string() + ": tensor volume must have 6 components");

    std::size_t bytes = 0;
    switch (datatype) {
        case kDtUint8: bytes = 1; break;
        case kDtInt16: case kDtUint16: bytes = 2; break;
        case kDtInt32: case kDtFloat32: bytes = 4; break;
        case kDtFloat64: bytes = 8; break;
        default: fail(ErrorKind::Format, path.string() + ": unsupported datatype " + std::to_string(datatype));
    }
    const std::size_t nvox = raw.meta.voxel_count();
    const std::size_t count = nvox * channels;
    const std::size_t start = static_cast<std::size_t>(vox_offset);
    if (vox_offset < kHeaderSize || start + count * bytes > file.size())
        fail(ErrorKind::Format, path.string() + ": payload shorter than header dims");

    std::vector<double> values(count);
    const char* p = file.data() + start;
    for (std::size_t n = 0; n < count; ++n, p += bytes) {
        double v = 0.0;
        switch (datatype) {
            case kDtUint8: v = static_cast<unsigned char>(*p); break;
            case kDtInt16: { std::int16_t x; std::memcpy(&x, p, 2); v = x; break; }
            case kDtUint16: { std::uint16_t x; std::memcpy(&x, p, 2); v = x; break; }
            case kDtInt32: { std::int32_t x; std::memcpy(&x, p, 4); v = x; break; }
            case kDtFloat32: { float x; std::memcpy(&x, p, 4); v = x; break; }
            case kDtFloat64: { std::memcpy(&v, p, 8); break; }
        }
        if (slope != 1.0f || inter != 0.0f) v = v * slope + inter;
        values[n] = v;
    }

    if (channels > 1 && !channel_fastest) {
        raw.data.resize(count);
        for (std::size_t c = 0; c < static_cast<std::size_t>(channels); ++c)
            for (std::size_t n = 0; n < nvox; ++n) raw.data[n * channels + c] = values[c * nvox + n];
    } else {
        raw.data = std::move(values);
    }

    if (raw.kind == VolumeKind::Tensor && tensor_order != kCanonicalOrder) {
        const auto perm = tensor_order_permutation(tensor_order);
        for (std::size_t n = 0; n < nvox; ++n) {
            double tmp[6];
            for (int q = 0; q < 6; ++q) tmp[q] = raw.data[n * 6 + perm[q]];
            std::copy(tmp, tmp + 6, raw.data.begin() + n * 6);
        }
    }
    return raw;
}

void write_raw(const RawVolume& raw, const std::filesystem::path& path) {
    raw.meta.validate();
    require(raw.data.size() == raw.meta.voxel_count() * raw.channels, "payload size does not match dims");
    for (int a = 0; a < 3; ++a) require(raw.meta.dims[a] <= 32767, "dimension exceeds NIfTI-1 limit");

    nlohmann::json ext;
    ext["dtalign"]["spacing"] = {raw.meta.spacing[0], raw.meta.spacing[1], raw.meta.spacing[2]};
    ext["dtalign"]["origin"] = {raw.meta.origin[0], raw.meta.origin[1], raw.meta.origin[2]};
    const bool series = raw.kind == VolumeKind::Series;
    if (raw.channels > 1 && !series) ext["dtalign"]["layout"] = "channel-fastest";
    if (raw.kind == VolumeKind::Tensor) ext["dtalign"]["tensor_order"] = kCanonicalOrder;
    if (!raw.label_names.empty()) {
        nlohmann::json labels = nlohmann::json::object();
        for (const auto& [k, v] : raw.label_names) labels[std::to_string(k)] = v;
        ext["dtalign"]["labels"] = labels;
    }
    std::string text = ext.dump();
    std::size_t esize = 8 + text.size() + 1;
    esize = (esize + 15) / 16 * 16;
    const std::size_t vox_offset = kHeaderSize + 4 + esize;

    const bool is_label = raw.kind == VolumeKind::Label;
    const std::size_t bytes = is_label ? 4 : 8;
    std::vector<char> buf(vox_offset + raw.data.size() * bytes, 0);
    put<int>(buf, 0, kHeaderSize);
    put<char>(buf, 38, 'r');
    short ndim = 3;
    std::array<short, 8> dim{3, static_cast<short>(raw.meta.dims[0]), static_cast<short>(raw.meta.dims[1]),
                             static_cast<short>(raw.meta.dims[2]), 1, 1, 1, 1};
    if (series) {
        ndim = 4;
        dim[4] = static_cast<short>(raw.channels);
    } else if (raw.channels > 1) {
        ndim = 5;
        dim[5] = static_cast<short>(raw.channels);
    }
    dim[0] = ndim;
    for (int a = 0; a < 8; ++a) put<short>(buf, 40 + 2 * a, dim[a]);
    short intent = kIntentNone;
    if (raw.kind == VolumeKind::Tensor) intent = kIntentSymMatrix;
    if (raw.kind == VolumeKind::Vector) intent = kIntentDispVect;
    if (is_label) intent = kIntentLabel;
    put<short>(buf, 68, intent);
    put<short>(buf, 70, is_label ? kDtInt32 : kDtFloat64);
    put<short>(buf, 72, static_cast<short>(bytes * 8));
    put<float>(buf, 76, 1.0f);  // qfac
    for (int a = 0; a < 3; ++a) put<float>(buf, 80 + 4 * a, static_cast<float>(raw.meta.spacing[a]));
    put<float>(buf, 108, static_cast<float>(vox_offset));
    put<float>(buf, 112, 1.0f);
    put<char>(buf, 123, 2 | 8);  // mm, seconds
    std::strncpy(buf.data() + 148, "dtalign", 79);
    put<short>(buf, 252, 1);
    put<short>(buf, 254, 1);
    for (int a = 0; a < 3; ++a) {
        put<float>(buf, 268 + 4 * a, static_cast<float>(raw.meta.origin[a]));
        put<float>(buf, 280 + 16 * a + 4 * a, static_cast<float>(raw.meta.spacing[a]));
        put<float>(buf, 280 + 16 * a + 12, static_cast<float>(raw.meta.origin[a]));
    }
    std::memcpy(buf.data() + 344, "n+1", 4);
    buf[kHeaderSize] = 1;
    put<int>(buf, kHeaderSize + 4, static_cast<int>(esize));
    put<int>(buf, kHeaderSize + 8, kExtensionCode);
    std::memcpy(buf.data() + kHeaderSize + 12, text.data(), text.size());

    char* p = buf.data() + vox_offset;
    const std::size_t nvox = raw.meta.voxel_count();
    for (std::size_t n = 0; n < raw.data.size(); ++n) {
        // series frames are stored frame-slowest as in standard 4-D files
        std::size_t src = n;
        if (series) src = (n % nvox) * raw.channels + n / nvox;
        if (is_label) {
            const auto x = static_cast<std::int32_t>(raw.data[src]);
            std::memcpy(p + n * 4, &x, 4);
        } else {
            std::memcpy(p + n * 8, &raw.data[src], 8);
        }
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::IO, "cannot write " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) fail(ErrorKind::IO, "write failed for " + path.string());
}

AnyVolume read_volume(const std::filesystem::path& path) {
    RawVolume raw = read_raw(path);
    const std::size_t nvox = raw.meta.voxel_count();
    switch (raw.kind) {
        case VolumeKind::Scalar: {
            ScalarVolume v(raw.meta);
            v.data = std::move(raw.data);
            return v;
        }
        case VolumeKind::Label: {
            if (raw.channels != 1) fail(ErrorKind::Format, path.string() + ": label volume must be single-channel");
            LabelVolume v(raw.meta);
            for (std::size_t n = 0; n < nvox; ++n) {
                if (raw.data[n] < 0 || raw.data[n] != std::floor(raw.data[n]))
                    fail(ErrorKind::Format, path.string() + ": labels must be non-negative integers");
                v.data[n] = static_cast<std::int32_t>(raw.data[n]);
            }
            v.label_names = std::move(raw.label_names);
            v.name_missing_labels();
            return v;
        }
        case VolumeKind::Tensor: {
            TensorVolume v(raw.meta);
            for (std::size_t n = 0; n < nvox; ++n)
                for (int q = 0; q < 6; ++q) v.data[n][q] = raw.data[n * 6 + q];
            return v;
        }
        default:
            fail(ErrorKind::Format, path.string() + ": not a scalar, tensor or label volume");
    }
}

ScalarVolume read_scalar(const std::filesystem::path& path) {
    auto v = read_volume(path);
    if (auto* s = std::get_if<ScalarVolume>(&v)) return std::move(*s);
    if (auto* l = std::get_if<LabelVolume>(&v)) {  // integer-typed scalar maps
        ScalarVolume s(l->meta);
        for (std::size_t n = 0; n < s.data.size(); ++n) s.data[n] = l->data[n];
        return s;
    }
    fail(ErrorKind::Format, path.string() + ": expected a scalar volume");
}

TensorVolume read_tensor(const std::filesystem::path& path) {
    auto v = read_volume(path);
    if (auto* t = std::get_if<TensorVolume>(&v)) return std::move(*t);
    fail(ErrorKind::Format, path.string() + ": expected a tensor volume");
}

LabelVolume read_labels(const std::filesystem::path& path) {
    auto v = read_volume(path);
    if (auto* l = std::get_if<LabelVolume>(&v)) return std::move(*l);
    if (auto* s = std::get_if<ScalarVolume>(&v)) {  // float-typed masks
        LabelVolume l(s->meta);
        for (std::size_t n = 0; n < l.data.size(); ++n) {
            if (s->data[n] < 0 || s->data[n] != std::floor(s->data[n]))
                fail(ErrorKind::Format, path.string() + ": labels must be non-negative integers");
            l.data[n] = static_cast<std::int32_t>(s->data[n]);
        }
        l.name_missing_labels();
        return l;
    }
    fail(ErrorKind::Format, path.string() + ": expected a label volume");
}

std::vector<ScalarVolume> read_series(const std::filesystem::path& path) {
    RawVolume raw = read_raw(path);
    const std::size_t nvox = raw.meta.voxel_count();
    std::vector<ScalarVolume> frames(raw.channels, ScalarVolume(raw.meta));
    for (std::size_t n = 0; n < nvox; ++n)
        for (int c = 0; c < raw.channels; ++c) frames[c].data[n] = raw.data[n * raw.channels + c];
    return frames;
}

void write_volume(const ScalarVolume& v, const std::filesystem::path& path) {
    v.validate();
    RawVolume raw{v.meta, VolumeKind::Scalar, 1, v.data, {}};
    write_raw(raw, path);
}

void write_volume(const TensorVolume& v, const std::filesystem::path& path) {
    v.validate();
    RawVolume raw{v.meta, VolumeKind::Tensor, 6, {}, {}};
    raw.data.reserve(v.data.size() * 6);
    for (const auto& d : v.data) raw.data.insert(raw.data.end(), d.begin(), d.end());
    write_raw(raw, path);
}

void write_volume(const LabelVolume& v, const std::filesystem::path& path) {
    v.validate();
    RawVolume raw{v.meta, VolumeKind::Label, 1, {v.data.begin(), v.data.end()}, v.label_names};
    write_raw(raw, path);
}

void write_series(const std::vector<ScalarVolume>& frames, const std::filesystem::path& path) {
    require(!frames.empty(), "series needs at least one frame");
    const GridMeta& m = frames.front().meta;
    RawVolume raw{m, VolumeKind::Series, static_cast<int>(frames.size()), {}, {}};
    raw.data.resize(m.voxel_count() * frames.size());
    for (std::size_t c = 0; c < frames.size(); ++c) {
        require(frames[c].meta == m, "series frames must share one grid");
        for (std::size_t n = 0; n < m.voxel_count(); ++n) raw.data[n * frames.size() + c] = frames[c].data[n];
    }
    write_raw(raw, path);
}

}  // namespace dtalign
