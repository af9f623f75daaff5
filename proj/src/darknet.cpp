#include "natpatch/darknet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "natpatch/nn.hpp"

namespace natpatch {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

constexpr double kLeakySlope = 0.1;
constexpr double kBatchNormEps = 1e-6;  // darknet: (x - mean) / (sqrt(var) + eps)

}  // namespace

bool CfgSection::has(const std::string& key) const {
    return std::any_of(options.begin(), options.end(), [&](const auto& kv) { return kv.first == key; });
}

std::string CfgSection::get(const std::string& key, const std::string& fallback) const {
    for (const auto& [k, v] : options) {
        if (k == key) return v;
    }
    return fallback;
}

int CfgSection::get_int(const std::string& key, int fallback) const {
    if (!has(key)) return fallback;
    try {
        return std::stoi(get(key, ""));
    } catch (const std::exception&) {
        throw std::invalid_argument("[" + type + "] " + key + " is not an integer: " + get(key, ""));
    }
}

std::vector<int> CfgSection::get_ints(const std::string& key) const {
    std::vector<int> out;
    for (const auto& s : split_commas(get(key, ""))) {
        try {
            out.push_back(std::stoi(s));
        } catch (const std::exception&) {
            throw std::invalid_argument("[" + type + "] " + key + " has a non-integer entry: " + s);
        }
    }
    return out;
}

std::vector<double> CfgSection::get_doubles(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : split_commas(get(key, ""))) {
        try {
            out.push_back(std::stod(s));
        } catch (const std::exception&) {
            throw std::invalid_argument("[" + type + "] " + key + " has a non-numeric entry: " + s);
        }
    }
    return out;
}

std::vector<CfgSection> parse_darknet_cfg(const std::string& text) {
    std::vector<CfgSection> sections;
    std::stringstream ss(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const auto hash = line.find_first_of("#;");
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw std::invalid_argument("cfg line " + std::to_string(lineno) + ": bad section header");
            sections.push_back(CfgSection{trim(line.substr(1, line.size() - 2)), {}});
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos || sections.empty()) {
            throw std::invalid_argument("cfg line " + std::to_string(lineno) + ": expected key=value inside a section");
        }
        sections.back().options.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return sections;
}

DarknetDetector::DarknetDetector(const std::string& cfg_text, std::vector<std::string> class_names)
    : class_names_(std::move(class_names)) {
    const auto sections = parse_darknet_cfg(cfg_text);
    if (sections.empty() || (sections.front().type != "net" && sections.front().type != "network")) {
        throw std::invalid_argument("darknet cfg must start with a [net] section");
    }
    const CfgSection& net = sections.front();
    const int w = net.get_int("width", 416), h = net.get_int("height", 416), c = net.get_int("channels", 3);
    if (w != h || w <= 0) throw std::invalid_argument("darknet cfg needs a square positive input size");
    if (c != 3) throw std::invalid_argument("darknet cfg must take 3 input channels");
    input_size_ = static_cast<std::size_t>(w);

    std::size_t ch = 3, hh = input_size_, ww = input_size_;
    auto resolve = [&](int ref, std::size_t index) -> std::size_t {
        const long long abs = ref < 0 ? static_cast<long long>(index) + ref : ref;
        if (abs < 0 || abs >= static_cast<long long>(index)) {
            throw std::invalid_argument("layer " + std::to_string(index) + " refers to layer " + std::to_string(ref) +
                                        " which does not precede it");
        }
        return static_cast<std::size_t>(abs);
    };

    for (std::size_t s = 1; s < sections.size(); ++s) {
        const CfgSection& sec = sections[s];
        const std::size_t index = layers_.size();
        LayerSpec L;
        if (sec.type == "convolutional") {
            L.kind = Kind::conv;
            L.filters = static_cast<std::size_t>(sec.get_int("filters", 1));
            L.size = static_cast<std::size_t>(sec.get_int("size", 1));
            L.stride = static_cast<std::size_t>(sec.get_int("stride", 1));
            L.pad = sec.get_int("pad", 0) ? L.size / 2 : static_cast<std::size_t>(sec.get_int("padding", 0));
            L.batch_norm = sec.get_int("batch_normalize", 0) != 0;
            const std::string act = sec.get("activation", "logistic");
            if (act == "leaky") L.leaky = true;
            else if (act != "linear") throw std::invalid_argument("unsupported activation " + act + " in layer " + std::to_string(index));
            if (L.filters == 0 || L.size == 0 || L.stride == 0) throw std::invalid_argument("degenerate convolution in layer " + std::to_string(index));
            L.weight = Tensor({L.filters, ch, L.size, L.size});
            L.bias = Tensor({L.filters});
            if (L.batch_norm) {
                L.scales = Tensor({L.filters});
                L.scales.fill(1.0);
                L.mean = Tensor({L.filters});
                L.variance = Tensor({L.filters});
                L.variance.fill(1.0);
            }
            const nn::ConvGeometry g{L.size, L.stride, L.pad};
            hh = g.out_size(hh);
            ww = g.out_size(ww);
            ch = L.filters;
        } else if (sec.type == "shortcut") {
            L.kind = Kind::shortcut;
            if (sec.get("activation", "linear") != "linear") throw std::invalid_argument("shortcut activation must be linear");
            L.sources = {resolve(-1, index), resolve(sec.get_int("from", -3), index)};
            const LayerSpec& other = layers_[L.sources[1]];
            if (other.channels != ch || other.height != hh || other.width != ww) {
                throw std::invalid_argument("shortcut in layer " + std::to_string(index) + " joins mismatched shapes");
            }
        } else if (sec.type == "route") {
            L.kind = Kind::route;
            const auto refs = sec.get_ints("layers");
            if (refs.empty()) throw std::invalid_argument("route layer " + std::to_string(index) + " lists no layers");
            std::size_t total = 0;
            for (int r : refs) {
                const std::size_t src = resolve(r, index);
                const LayerSpec& o = layers_[src];
                if (!L.sources.empty() && (o.height != layers_[L.sources.front()].height || o.width != layers_[L.sources.front()].width)) {
                    throw std::invalid_argument("route layer " + std::to_string(index) + " concatenates mismatched sizes");
                }
                L.sources.push_back(src);
                total += o.channels;
            }
            ch = total;
            hh = layers_[L.sources.front()].height;
            ww = layers_[L.sources.front()].width;
        } else if (sec.type == "upsample") {
            L.kind = Kind::upsample;
            L.stride = static_cast<std::size_t>(sec.get_int("stride", 2));
            hh *= L.stride;
            ww *= L.stride;
        } else if (sec.type == "maxpool") {
            L.kind = Kind::maxpool;
            L.size = static_cast<std::size_t>(sec.get_int("size", 2));
            L.stride = static_cast<std::size_t>(sec.get_int("stride", static_cast<int>(L.size)));
            L.pool_pad = static_cast<std::size_t>(sec.get_int("padding", static_cast<int>(L.size) - 1));
            hh = (hh + L.pool_pad - L.size) / L.stride + 1;
            ww = (ww + L.pool_pad - L.size) / L.stride + 1;
        } else if (sec.type == "yolo") {
            L.kind = Kind::yolo;
            L.classes = static_cast<std::size_t>(sec.get_int("classes", 80));
            const auto all = sec.get_doubles("anchors");
            auto mask = sec.get_ints("mask");
            if (all.size() % 2 != 0) throw std::invalid_argument("yolo anchors must come in pairs");
            if (mask.empty()) {
                for (std::size_t a = 0; a < all.size() / 2; ++a) mask.push_back(static_cast<int>(a));
            }
            for (int m : mask) {
                if (m < 0 || static_cast<std::size_t>(m) * 2 + 1 >= all.size()) throw std::invalid_argument("yolo mask index out of range");
                L.anchors.emplace_back(all[2 * static_cast<std::size_t>(m)], all[2 * static_cast<std::size_t>(m) + 1]);
            }
            if (ch != L.anchors.size() * (5 + L.classes)) {
                throw std::invalid_argument("yolo layer " + std::to_string(index) + " expects " +
                                            std::to_string(L.anchors.size() * (5 + L.classes)) + " channels, got " +
                                            std::to_string(ch));
            }
            if (L.classes != class_names_.size()) {
                throw std::invalid_argument("yolo layer " + std::to_string(index) + " has " + std::to_string(L.classes) +
                                            " classes but " + std::to_string(class_names_.size()) + " names were given");
            }
        } else {
            throw std::invalid_argument("unsupported darknet section [" + sec.type + "]");
        }
        L.channels = ch;
        L.height = hh;
        L.width = ww;
        if (hh == 0 || ww == 0) throw std::invalid_argument("layer " + std::to_string(index) + " has an empty output");
        layers_.push_back(std::move(L));
    }
    if (std::none_of(layers_.begin(), layers_.end(), [](const LayerSpec& l) { return l.kind == Kind::yolo; })) {
        throw std::invalid_argument("darknet cfg has no [yolo] layer");
    }
    fold();
}

DarknetDetector DarknetDetector::load(const std::filesystem::path& cfg, const std::filesystem::path& weights,
                                      const std::filesystem::path& names) {
    std::ifstream in(cfg);
    if (!in) throw std::runtime_error("cannot open darknet cfg " + cfg.string());
    std::stringstream ss;
    ss << in.rdbuf();
    DarknetDetector det(ss.str(), read_class_names(names));
    det.load_weights(weights);
    return det;
}

void DarknetDetector::fold() {
    for (LayerSpec& L : layers_) {
        if (L.kind != Kind::conv) continue;
        L.folded_weight = L.weight;
        L.folded_bias = L.bias;
        if (!L.batch_norm) continue;
        const std::size_t per = L.weight.size() / L.filters;
        for (std::size_t f = 0; f < L.filters; ++f) {
            const double k = L.scales[f] / (std::sqrt(L.variance[f]) + kBatchNormEps);
            for (std::size_t i = 0; i < per; ++i) L.folded_weight[f * per + i] *= k;
            L.folded_bias[f] = L.bias[f] - k * L.mean[f];
        }
    }
}

void DarknetDetector::load_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open darknet weights " + path.string());
    std::int32_t major = 0, minor = 0, revision = 0;
    in.read(reinterpret_cast<char*>(&major), 4);
    in.read(reinterpret_cast<char*>(&minor), 4);
    in.read(reinterpret_cast<char*>(&revision), 4);
    if ((major * 10 + minor) >= 2 && major < 1000 && minor < 1000) {
        std::uint64_t seen = 0;
        in.read(reinterpret_cast<char*>(&seen), 8);
    } else {
        std::int32_t seen = 0;
        in.read(reinterpret_cast<char*>(&seen), 4);
    }
    if (!in) throw std::runtime_error("darknet weights " + path.string() + " has a truncated header");
    std::vector<float> buf;
    auto read_into = [&](Tensor& t, std::size_t layer) {
        buf.resize(t.size());
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!in) {
            throw std::runtime_error("darknet weights " + path.string() + " ended early in layer " + std::to_string(layer) +
                                     "; does it match the cfg?");
        }
        for (std::size_t i = 0; i < buf.size(); ++i) t[i] = static_cast<double>(buf[i]);
    };
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        LayerSpec& L = layers_[i];
        if (L.kind != Kind::conv) continue;
        read_into(L.bias, i);
        if (L.batch_norm) {
            read_into(L.scales, i);
            read_into(L.mean, i);
            read_into(L.variance, i);
        }
        read_into(L.weight, i);
    }
    fold();
}

void DarknetDetector::save_weights(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write darknet weights " + path.string());
    const std::int32_t header[3] = {0, 2, 0};
    const std::uint64_t seen = 0;
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    out.write(reinterpret_cast<const char*>(&seen), sizeof(seen));
    auto write = [&](const Tensor& t) {
        std::vector<float> buf(t.size());
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t[i]);
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    };
    for (const LayerSpec& L : layers_) {
        if (L.kind != Kind::conv) continue;
        write(L.bias);
        if (L.batch_norm) {
            write(L.scales);
            write(L.mean);
            write(L.variance);
        }
        write(L.weight);
    }
    if (!out) throw std::runtime_error("failed writing darknet weights " + path.string());
}

void DarknetDetector::randomize(Rng& rng, double stddev) {
    for (LayerSpec& L : layers_) {
        if (L.kind != Kind::conv) continue;
        nn::init_normal(L.weight, rng, 0.0, stddev);
        nn::init_normal(L.bias, rng, 0.0, stddev);
        if (L.batch_norm) {
            L.scales.fill(1.0);
            L.mean.fill(0.0);
            L.variance.fill(1.0);
        }
    }
    fold();
}

std::vector<Tensor> DarknetDetector::forward_all(const Tensor& input) const {
    if (input.rank() != 3 || input.dim(0) != 3 || input.dim(1) != input_size_ || input.dim(2) != input_size_) {
        throw std::invalid_argument("darknet detector expects a (3, " + std::to_string(input_size_) + ", " +
                                    std::to_string(input_size_) + ") input, got " + shape_string(input.shape()));
    }
    std::vector<Tensor> out(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& L = layers_[i];
        const Tensor& x = i == 0 ? input : out[i - 1];
        switch (L.kind) {
            case Kind::conv: {
                Tensor y = nn::conv2d(x, L.folded_weight, L.folded_bias, nn::ConvGeometry{L.size, L.stride, L.pad});
                if (L.leaky) {
                    for (std::size_t k = 0; k < y.size(); ++k) {
                        if (y[k] < 0) y[k] *= kLeakySlope;
                    }
                }
                out[i] = std::move(y);
                break;
            }
            case Kind::shortcut:
                out[i] = out[L.sources[0]] + out[L.sources[1]];
                break;
            case Kind::route: {
                Tensor y({L.channels, L.height, L.width});
                std::size_t offset = 0;
                for (std::size_t src : L.sources) {
                    const Tensor& s = out[src];
                    std::copy(s.data(), s.data() + s.size(), y.data() + offset);
                    offset += s.size();
                }
                out[i] = std::move(y);
                break;
            }
            case Kind::upsample: {
                const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), s = L.stride;
                Tensor y({c, h * s, w * s});
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t yy = 0; yy < h * s; ++yy) {
                        for (std::size_t xx = 0; xx < w * s; ++xx) y.at(ch, yy, xx) = x.at(ch, yy / s, xx / s);
                    }
                }
                out[i] = std::move(y);
                break;
            }
            case Kind::maxpool: {
                const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
                const long long off = -static_cast<long long>(L.pool_pad / 2);
                Tensor y({c, L.height, L.width});
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t oy = 0; oy < L.height; ++oy) {
                        for (std::size_t ox = 0; ox < L.width; ++ox) {
                            double best = -std::numeric_limits<double>::infinity();
                            for (std::size_t ky = 0; ky < L.size; ++ky) {
                                for (std::size_t kx = 0; kx < L.size; ++kx) {
                                    const long long iy = off + static_cast<long long>(oy * L.stride + ky);
                                    const long long ix = off + static_cast<long long>(ox * L.stride + kx);
                                    if (iy < 0 || ix < 0 || iy >= static_cast<long long>(h) || ix >= static_cast<long long>(w)) continue;
                                    best = std::max(best, x.at(ch, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)));
                                }
                            }
                            y.at(ch, oy, ox) = best;
                        }
                    }
                }
                out[i] = std::move(y);
                break;
            }
            case Kind::yolo:
                out[i] = x;
                break;
        }
    }
    return out;
}

std::vector<Tensor> DarknetDetector::yolo_outputs(const Tensor& network_input) const {
    const auto out = forward_all(network_input);
    std::vector<Tensor> heads;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (layers_[i].kind == Kind::yolo) heads.push_back(out[i]);
    }
    return heads;
}

std::vector<Candidate> DarknetDetector::decode(const std::vector<Tensor>& outputs) const {
    std::vector<Candidate> candidates;
    const double net = static_cast<double>(input_size_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& L = layers_[i];
        if (L.kind != Kind::yolo) continue;
        const Tensor& o = outputs[i];
        const std::size_t stride = 5 + L.classes;
        for (std::size_t a = 0; a < L.anchors.size(); ++a) {
            for (std::size_t y = 0; y < L.height; ++y) {
                for (std::size_t x = 0; x < L.width; ++x) {
                    auto v = [&](std::size_t k) { return o.at(a * stride + k, y, x); };
                    const double cx = (static_cast<double>(x) + nn::sigmoid(v(0))) / static_cast<double>(L.width) * net;
                    const double cy = (static_cast<double>(y) + nn::sigmoid(v(1))) / static_cast<double>(L.height) * net;
                    const double bw = std::exp(v(2)) * L.anchors[a].first;
                    const double bh = std::exp(v(3)) * L.anchors[a].second;
                    Candidate c;
                    c.box = Box{cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2};
                    c.objectness = nn::sigmoid(v(4));
                    c.class_probs.resize(L.classes);
                    for (std::size_t k = 0; k < L.classes; ++k) c.class_probs[k] = nn::sigmoid(v(5 + k));
                    candidates.push_back(std::move(c));
                }
            }
        }
    }
    return candidates;
}

std::vector<Candidate> DarknetDetector::infer(const Tensor& network_input) const {
    return decode(forward_all(network_input));
}

NetworkLoss DarknetDetector::network_vanish_loss(const Tensor& network_input, bool want_gradient) const {
    const auto out = forward_all(network_input);
    NetworkLoss result;
    result.candidates = decode(out);

    std::vector<Tensor> grads(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& L = layers_[i];
        if (L.kind != Kind::yolo) continue;
        const std::size_t stride = 5 + L.classes;
        Tensor g({L.channels, L.height, L.width});
        for (std::size_t a = 0; a < L.anchors.size(); ++a) {
            for (std::size_t y = 0; y < L.height; ++y) {
                for (std::size_t x = 0; x < L.width; ++x) {
                    const double logit = out[i].at(a * stride + 4, y, x);
                    result.loss += nn::softplus(logit);
                    g.at(a * stride + 4, y, x) = nn::sigmoid(logit);
                }
            }
        }
        grads[i] = std::move(g);
    }
    if (!want_gradient) return result;

    Tensor grad_input(network_input.shape());
    const std::size_t kInput = static_cast<std::size_t>(-1);
    auto accumulate = [&](std::size_t target, const Tensor& g) {
        Tensor& dst = target == kInput ? grad_input : grads[target];
        if (dst.size() == 0) dst = Tensor(g.shape());
        dst += g;
    };
    for (std::size_t ii = layers_.size(); ii-- > 0;) {
        if (grads[ii].size() == 0) continue;
        const LayerSpec& L = layers_[ii];
        const std::size_t prev = ii == 0 ? kInput : ii - 1;
        const Tensor& x = ii == 0 ? network_input : out[ii - 1];
        Tensor g = std::move(grads[ii]);
        switch (L.kind) {
            case Kind::conv: {
                if (L.leaky) {
                    for (std::size_t k = 0; k < g.size(); ++k) {
                        if (out[ii][k] < 0) g[k] *= kLeakySlope;
                    }
                }
                accumulate(prev, nn::conv2d_backward_input(g, L.folded_weight, x.shape(),
                                                           nn::ConvGeometry{L.size, L.stride, L.pad}));
                break;
            }
            case Kind::shortcut:
                accumulate(L.sources[0], g);
                accumulate(L.sources[1], g);
                break;
            case Kind::route: {
                std::size_t offset = 0;
                for (std::size_t src : L.sources) {
                    Tensor part(out[src].shape());
                    std::copy(g.data() + offset, g.data() + offset + part.size(), part.data());
                    offset += part.size();
                    accumulate(src, part);
                }
                break;
            }
            case Kind::upsample: {
                const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), s = L.stride;
                Tensor gx({c, h, w});
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t yy = 0; yy < h * s; ++yy) {
                        for (std::size_t xx = 0; xx < w * s; ++xx) gx.at(ch, yy / s, xx / s) += g.at(ch, yy, xx);
                    }
                }
                accumulate(prev, gx);
                break;
            }
            case Kind::maxpool: {
                const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
                const long long off = -static_cast<long long>(L.pool_pad / 2);
                Tensor gx({c, h, w});
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t oy = 0; oy < L.height; ++oy) {
                        for (std::size_t ox = 0; ox < L.width; ++ox) {
                            double best = -std::numeric_limits<double>::infinity();
                            std::size_t by = 0, bx = 0;
                            for (std::size_t ky = 0; ky < L.size; ++ky) {
                                for (std::size_t kx = 0; kx < L.size; ++kx) {
                                    const long long iy = off + static_cast<long long>(oy * L.stride + ky);
                                    const long long ix = off + static_cast<long long>(ox * L.stride + kx);
                                    if (iy < 0 || ix < 0 || iy >= static_cast<long long>(h) || ix >= static_cast<long long>(w)) continue;
                                    const double v = x.at(ch, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
                                    if (v > best) {
                                        best = v;
                                        by = static_cast<std::size_t>(iy);
                                        bx = static_cast<std::size_t>(ix);
                                    }
                                }
                            }
                            gx.at(ch, by, bx) += g.at(ch, oy, ox);
                        }
                    }
                }
                accumulate(prev, gx);
                break;
            }
            case Kind::yolo:
                accumulate(prev, g);
                break;
        }
    }
    result.gradient = std::move(grad_input);
    return result;
}

}  // namespace natpatch
