#include "natpatch/generators.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

#include "natpatch/archive.hpp"

namespace natpatch {

namespace {

Tensor to_unit_range(const Tensor& tanh_out) {
    Tensor out(tanh_out.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * (tanh_out[i] + 1.0);
    return out;
}

Tensor to_tanh_range(const Tensor& unit) {
    Tensor out(unit.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 2.0 * unit[i] - 1.0;
    return out;
}

void export_network(Archive& a, const std::string& prefix, const nn::Sequential& net) {
    const auto params = net.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) a.tensors[prefix + "param." + std::to_string(i)] = *params[i];
    const auto buffers = net.buffers();
    for (std::size_t i = 0; i < buffers.size(); ++i) a.tensors[prefix + "buffer." + std::to_string(i)] = *buffers[i];
}

void import_network(const Archive& a, const std::string& prefix, nn::Sequential& net,
                    const std::filesystem::path& path) {
    auto import_list = [&](const std::vector<Tensor*>& targets, const std::string& kind) {
        for (std::size_t i = 0; i < targets.size(); ++i) {
            const std::string key = prefix + kind + "." + std::to_string(i);
            if (!a.has(key)) {
                throw std::runtime_error("checkpoint " + path.string() + " is missing tensor '" + key + "'");
            }
            const Tensor& t = a.tensor(key);
            if (t.shape() != targets[i]->shape()) {
                throw std::runtime_error("checkpoint " + path.string() + ": tensor '" + key + "' has shape " +
                                         shape_string(t.shape()) + ", architecture expects " +
                                         shape_string(targets[i]->shape()));
            }
            *targets[i] = t;
        }
    };
    import_list(net.parameters(), "param");
    import_list(net.buffers(), "buffer");
}

double mean_bce_with_logits(const Tensor& logits, double target, Tensor& grad) {
    const auto n = static_cast<double>(logits.size());
    grad = Tensor(logits.shape());
    double loss = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double l = logits[i];
        loss += target > 0.5 ? nn::softplus(-l) : nn::softplus(l);
        grad[i] = (nn::sigmoid(l) - target) / n;
    }
    return loss / n;
}

}  // namespace

void GeneratorArch::validate() const {
    if (latent_dim == 0) throw std::invalid_argument("generator latent_dim must be positive");
    if (base_channels == 0) throw std::invalid_argument("generator base_channels must be positive");
    if (upsample_blocks == 0 || upsample_blocks > 7) {
        throw std::invalid_argument("generator upsample_blocks must be in [1, 7]");
    }
}

nlohmann::json GeneratorArch::to_json() const {
    return {{"latent_dim", latent_dim},   {"base_channels", base_channels}, {"upsample_blocks", upsample_blocks},
            {"batch_norm", batch_norm}, {"num_classes", num_classes}};
}

GeneratorArch GeneratorArch::from_json(const nlohmann::json& j) {
    GeneratorArch a;
    a.latent_dim = j.value("latent_dim", a.latent_dim);
    a.base_channels = j.value("base_channels", a.base_channels);
    a.upsample_blocks = j.value("upsample_blocks", a.upsample_blocks);
    a.batch_norm = j.value("batch_norm", a.batch_norm);
    a.num_classes = j.value("num_classes", a.num_classes);
    a.validate();
    return a;
}

LatentVector sample_latent(const GeneratorArch& arch, Rng& rng, int class_id) {
    LatentVector v;
    v.z = Tensor({arch.latent_dim});
    for (double& x : v.z.values()) x = rng.normal();
    v.class_id = class_id;
    return v;
}

nn::Sequential build_generator(const GeneratorArch& arch) {
    arch.validate();
    const bool bias = !arch.batch_norm;
    nn::Sequential net;
    std::size_t ch = arch.base_channels << (arch.upsample_blocks - 1);
    net.add<nn::ConvTranspose2d>(arch.latent_dim + arch.num_classes, ch, nn::ConvGeometry{4, 1, 0}, bias);
    if (arch.batch_norm) net.add<nn::BatchNorm2d>(ch);
    net.add<nn::ActivationLayer>(nn::Activation::relu);
    for (std::size_t b = 1; b < arch.upsample_blocks; ++b) {
        net.add<nn::ConvTranspose2d>(ch, ch / 2, nn::ConvGeometry{4, 2, 1}, bias);
        ch /= 2;
        if (arch.batch_norm) net.add<nn::BatchNorm2d>(ch);
        net.add<nn::ActivationLayer>(nn::Activation::relu);
    }
    net.add<nn::ConvTranspose2d>(ch, 3, nn::ConvGeometry{4, 2, 1}, bias);
    net.add<nn::ActivationLayer>(nn::Activation::tanh);
    return net;
}

nn::Sequential build_discriminator(const GeneratorArch& arch) {
    arch.validate();
    const bool bias = !arch.batch_norm;
    nn::Sequential net;
    std::size_t ch = arch.base_channels;
    net.add<nn::Conv2d>(3 + arch.num_classes, ch, nn::ConvGeometry{4, 2, 1}, bias);
    net.add<nn::ActivationLayer>(nn::Activation::leaky_relu, 0.2);
    for (std::size_t b = 1; b < arch.upsample_blocks; ++b) {
        net.add<nn::Conv2d>(ch, ch * 2, nn::ConvGeometry{4, 2, 1}, bias);
        ch *= 2;
        if (arch.batch_norm) net.add<nn::BatchNorm2d>(ch);
        net.add<nn::ActivationLayer>(nn::Activation::leaky_relu, 0.2);
    }
    net.add<nn::Conv2d>(ch, 1, nn::ConvGeometry{4, 1, 0}, bias);
    return net;
}

void init_dcgan_weights(nn::Sequential& net, Rng& rng) {
    for (std::size_t i = 0; i < net.size(); ++i) {
        nn::Layer& layer = net.layer(i);
        auto params = layer.parameters();
        if (params.empty()) continue;
        if (layer.kind() == "batch_norm2d") {
            nn::init_normal(*params[0], rng, 1.0, 0.02);
            params[1]->fill(0.0);
        } else {
            nn::init_normal(*params[0], rng, 0.0, 0.02);
            if (params.size() > 1) params[1]->fill(0.0);
        }
    }
}

// ---------------------------------------------------------------------------

GeneratorHandle::GeneratorHandle(GeneratorArch arch, nn::Sequential net, bool trainable)
    : arch_(arch), net_(std::move(net)), trainable_(trainable) {
    arch_.validate();
}

GeneratorHandle GeneratorHandle::create(const GeneratorArch& arch, Rng& rng, bool trainable) {
    nn::Sequential net = build_generator(arch);
    init_dcgan_weights(net, rng);
    return GeneratorHandle(arch, std::move(net), trainable);
}

Tensor GeneratorHandle::input_batch(const std::vector<LatentVector>& zs) const {
    const std::size_t n = zs.size();
    const std::size_t channels = arch_.latent_dim + arch_.num_classes;
    Tensor input({n, channels, 1, 1});
    for (std::size_t i = 0; i < n; ++i) {
        const LatentVector& v = zs[i];
        if (v.z.size() != arch_.latent_dim) {
            throw std::invalid_argument("latent dimension " + std::to_string(v.z.size()) +
                                        " does not match generator latent_dim " + std::to_string(arch_.latent_dim));
        }
        for (std::size_t k = 0; k < arch_.latent_dim; ++k) {
            if (!std::isfinite(v.z[k])) throw std::invalid_argument("latent vector contains non-finite values");
            input[i * channels + k] = v.z[k];
        }
        if (arch_.conditional()) {
            if (v.class_id < 0 || static_cast<std::size_t>(v.class_id) >= arch_.num_classes) {
                throw std::invalid_argument("class id " + std::to_string(v.class_id) +
                                            " outside generator vocabulary of " + std::to_string(arch_.num_classes));
            }
            input[i * channels + arch_.latent_dim + static_cast<std::size_t>(v.class_id)] = 1.0;
        }
    }
    return input;
}

GeneratorTrace GeneratorHandle::generate_traced(const LatentVector& z) const {
    GeneratorTrace trace;
    const Tensor out = net_.forward(input_batch({z}), trace.tape);
    const std::size_t s = resolution();
    trace.patch = Patch(to_unit_range(out).reshaped({3, s, s}));
    return trace;
}

Patch GeneratorHandle::generate(const LatentVector& z) const { return generate_traced(z).patch; }

Tensor GeneratorHandle::backward(const GeneratorTrace& trace, const Tensor& grad_patch,
                                 std::vector<Tensor>* param_grads) const {
    if (param_grads && !trainable_) {
        throw std::logic_error("parameter gradients requested from a frozen generator");
    }
    const std::size_t s = resolution();
    Tensor g = grad_patch.reshaped({1, 3, s, s});
    g *= 0.5;
    const Tensor gin = net_.backward(g, trace.tape, param_grads);
    Tensor gz({arch_.latent_dim});
    for (std::size_t k = 0; k < arch_.latent_dim; ++k) gz[k] = gin[k];
    return gz;
}

Tensor GeneratorHandle::forward_train(const std::vector<LatentVector>& zs, nn::Tape& tape, bool update_stats) {
    if (!trainable_) throw std::logic_error("training forward on a frozen generator");
    return net_.forward_train(input_batch(zs), tape, update_stats);
}

Tensor GeneratorHandle::backward_train(const Tensor& grad_out, const nn::Tape& tape,
                                       std::vector<Tensor>* param_grads) const {
    return net_.backward(grad_out, tape, param_grads);
}

nn::Sequential& GeneratorHandle::mutable_network() {
    if (!trainable_) throw std::logic_error("generator is frozen; its parameters cannot be modified");
    return net_;
}

// ---------------------------------------------------------------------------

Discriminator::Discriminator(GeneratorArch arch, nn::Sequential net) : arch_(arch), net_(std::move(net)) {}

Discriminator Discriminator::create(const GeneratorArch& arch, Rng& rng) {
    nn::Sequential net = build_discriminator(arch);
    init_dcgan_weights(net, rng);
    return Discriminator(arch, std::move(net));
}

namespace {

Tensor with_class_channels(const Tensor& images, const std::vector<int>& classes, const GeneratorArch& arch) {
    if (!arch.conditional()) return images;
    const std::size_t n = images.dim(0), h = images.dim(2), w = images.dim(3);
    if (classes.size() != n) throw std::invalid_argument("conditional discriminator needs one class per image");
    const std::size_t c = 3 + arch.num_classes;
    Tensor out({n, c, h, w});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
            for (std::size_t p = 0; p < h * w; ++p) out[(i * c + ch) * h * w + p] = images[(i * 3 + ch) * h * w + p];
        }
        const auto cls = static_cast<std::size_t>(classes[i]);
        if (classes[i] < 0 || cls >= arch.num_classes) throw std::invalid_argument("class id outside vocabulary");
        for (std::size_t p = 0; p < h * w; ++p) out[(i * c + 3 + cls) * h * w + p] = 1.0;
    }
    return out;
}

Tensor drop_class_channels(const Tensor& grad, const GeneratorArch& arch) {
    if (!arch.conditional()) return grad;
    const std::size_t n = grad.dim(0), c = grad.dim(1), h = grad.dim(2), w = grad.dim(3);
    Tensor out({n, 3, h, w});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
            for (std::size_t p = 0; p < h * w; ++p) out[(i * 3 + ch) * h * w + p] = grad[(i * c + ch) * h * w + p];
        }
    }
    return out;
}

}  // namespace

Tensor Discriminator::forward_train(const Tensor& images, const std::vector<int>& classes, nn::Tape& tape,
                                    bool update_stats) {
    const Tensor logits = net_.forward_train(with_class_channels(images, classes, arch_), tape, update_stats);
    return logits.reshaped({images.dim(0)});
}

Tensor Discriminator::backward(const Tensor& grad_logits, const nn::Tape& tape,
                               std::vector<Tensor>* param_grads) const {
    const Tensor g = net_.backward(grad_logits.reshaped({grad_logits.size(), 1, 1, 1}), tape, param_grads);
    return drop_class_channels(g, arch_);
}

PatchRealism patch_realism_loss(Discriminator& discriminator, const Patch& patch, int class_id) {
    const std::size_t s = discriminator.arch().output_size();
    if (patch.height() != s || patch.width() != s) {
        throw std::invalid_argument("realism loss needs a patch at the generator's native size");
    }
    const GeneratorArch& arch = discriminator.arch();
    const Tensor images = to_tanh_range(patch.pixels).reshaped({1, 3, s, s});
    std::vector<int> classes;
    if (arch.conditional()) classes = {class_id};
    nn::Tape tape;
    const Tensor logits =
        discriminator.network().forward(with_class_channels(images, classes, arch), tape).reshaped({1});
    Tensor grad_logits;
    PatchRealism r;
    r.loss = mean_bce_with_logits(logits, 1.0, grad_logits);
    Tensor g = discriminator.backward(grad_logits, tape, nullptr);
    g *= 2.0;  // d tanh-range / d unit-range
    r.grad_patch = g.reshaped({3, s, s});
    return r;
}

// ---------------------------------------------------------------------------

GanTrainState GanTrainState::create(const GeneratorArch& arch, nn::AdamOptions options, std::uint64_t seed) {
    Rng rng = Rng::derive(seed, "gan-init");
    GeneratorHandle g = GeneratorHandle::create(arch, rng, true);
    Discriminator d = Discriminator::create(arch, rng);
    nn::Adam g_opt(options, g.network().parameters());
    nn::Adam d_opt(options, std::as_const(d).network().parameters());
    return GanTrainState{std::move(g), std::move(d), std::move(g_opt), std::move(d_opt), 0, 0, {}};
}

GanDiscriminatorStep gan_discriminator_update(GanTrainState& state, const Tensor& real, Rng& rng,
                                              const std::vector<int>& classes) {
    if (real.rank() != 4 || real.dim(0) == 0) {
        throw std::invalid_argument("gan_train_step needs a non-empty (N, 3, S, S) batch");
    }
    const GeneratorArch& arch = state.generator.arch();
    const std::size_t n = real.dim(0);
    const std::size_t s = arch.output_size();
    if (real.dim(1) != 3 || real.dim(2) != s || real.dim(3) != s) {
        throw std::invalid_argument("real batch " + shape_string(real.shape()) + " does not match generator output " +
                                    std::to_string(s) + "x" + std::to_string(s));
    }
    if (arch.conditional() && classes.size() != n) {
        throw std::invalid_argument("conditional GAN step needs one class label per real image");
    }

    GanDiscriminatorStep step;
    step.zs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int cls = arch.conditional() ? static_cast<int>(rng.index(arch.num_classes)) : -1;
        step.zs.push_back(sample_latent(arch, rng, cls));
        if (arch.conditional()) step.fake_classes.push_back(cls);
    }
    step.fake = state.generator.forward_train(step.zs, step.g_tape);

    auto d_grads = state.discriminator.network().zero_gradients();
    nn::Tape tape;
    Tensor grad;
    const Tensor real_logits = state.discriminator.forward_train(to_tanh_range(real), classes, tape);
    step.d_loss += mean_bce_with_logits(real_logits, 1.0, grad);
    state.discriminator.backward(grad, tape, &d_grads);
    const Tensor fake_logits = state.discriminator.forward_train(step.fake, step.fake_classes, tape);
    step.d_loss += mean_bce_with_logits(fake_logits, 0.0, grad);
    state.discriminator.backward(grad, tape, &d_grads);
    state.d_opt.step(state.discriminator.network().parameters(), d_grads);
    return step;
}

double gan_generator_update(GanTrainState& state, const GanDiscriminatorStep& step,
                            const std::vector<Tensor>* extra_grads) {
    // The discriminator's running statistics are left untouched here.
    nn::Tape tape;
    Tensor grad;
    const Tensor logits = state.discriminator.forward_train(step.fake, step.fake_classes, tape, false);
    const double g_loss = mean_bce_with_logits(logits, 1.0, grad);
    const Tensor grad_fake = state.discriminator.backward(grad, tape, nullptr);
    auto g_grads = state.generator.network().zero_gradients();
    state.generator.backward_train(grad_fake, step.g_tape, &g_grads);
    if (extra_grads) {
        if (extra_grads->size() != g_grads.size()) {
            throw std::invalid_argument("extra generator gradients do not match the parameter list");
        }
        for (std::size_t i = 0; i < g_grads.size(); ++i) g_grads[i] += (*extra_grads)[i];
    }
    state.g_opt.step(state.generator.mutable_network().parameters(), g_grads);
    return g_loss;
}

void record_gan_losses(GanTrainState& state, const GanLosses& losses) {
    if (!std::isfinite(losses.d_loss) || !std::isfinite(losses.g_loss)) {
        throw std::runtime_error("GAN step produced a non-finite loss (d=" + std::to_string(losses.d_loss) +
                                 ", g=" + std::to_string(losses.g_loss) + ")");
    }
    ++state.steps;
    state.history.push_back(losses);
}

GanLosses gan_train_step(GanTrainState& state, const Tensor& real, Rng& rng, const std::vector<int>& classes) {
    const GanDiscriminatorStep step = gan_discriminator_update(state, real, rng, classes);
    GanLosses losses;
    losses.d_loss = step.d_loss;
    losses.g_loss = gan_generator_update(state, step);
    record_gan_losses(state, losses);
    return losses;
}

// ---------------------------------------------------------------------------

void save_generator(const std::filesystem::path& path, const GeneratorHandle& handle) {
    Archive a;
    a.meta["kind"] = "generator";
    a.meta["arch"] = handle.arch().to_json();
    a.meta["layers"] = handle.network().describe();
    export_network(a, "", handle.network());
    write_archive(path, a);
}

GeneratorHandle load_pretrained(const PretrainedSpec& spec) {
    const Archive a = read_archive(spec.weights);
    if (a.meta.value("kind", "") != "generator") {
        throw std::runtime_error("checkpoint " + spec.weights.string() + " does not contain a generator");
    }
    const GeneratorArch arch = GeneratorArch::from_json(a.meta.at("arch"));
    if (spec.expected_arch && !(*spec.expected_arch == arch)) {
        throw std::runtime_error("checkpoint " + spec.weights.string() + " architecture " + arch.to_json().dump() +
                                 " does not match the requested " + spec.expected_arch->to_json().dump());
    }
    nn::Sequential net = build_generator(arch);
    import_network(a, "", net, spec.weights);
    return GeneratorHandle(arch, std::move(net), false);
}

void save_gan_state(const std::filesystem::path& path, const GanTrainState& state) {
    Archive a;
    a.meta["kind"] = "gan_state";
    a.meta["arch"] = state.generator.arch().to_json();
    a.meta["epoch"] = state.epoch;
    a.meta["steps"] = state.steps;
    nlohmann::json history = nlohmann::json::array();
    for (const auto& h : state.history) history.push_back({h.d_loss, h.g_loss});
    a.meta["history"] = history;
    export_network(a, "g.", state.generator.network());
    export_network(a, "d.", state.discriminator.network());
    state.g_opt.export_to(a, "g_opt");
    state.d_opt.export_to(a, "d_opt");
    write_archive(path, a);
}

GanTrainState load_gan_state(const std::filesystem::path& path) {
    const Archive a = read_archive(path);
    if (a.meta.value("kind", "") != "gan_state") {
        throw std::runtime_error("checkpoint " + path.string() + " does not contain a GAN training state");
    }
    const GeneratorArch arch = GeneratorArch::from_json(a.meta.at("arch"));
    nn::Sequential g = build_generator(arch);
    nn::Sequential d = build_discriminator(arch);
    import_network(a, "g.", g, path);
    import_network(a, "d.", d, path);
    GanTrainState state{GeneratorHandle(arch, std::move(g), true), Discriminator(arch, std::move(d)), {}, {}, 0, 0, {}};
    state.g_opt.import_from(a, "g_opt");
    state.d_opt.import_from(a, "d_opt");
    state.epoch = a.meta.at("epoch");
    state.steps = a.meta.at("steps");
    for (const auto& h : a.meta.at("history")) state.history.push_back({h.at(0), h.at(1)});
    return state;
}

Tensor sample_grid(const GeneratorHandle& handle, const std::vector<LatentVector>& zs, std::size_t columns) {
    if (zs.empty() || columns == 0) throw std::invalid_argument("sample grid needs at least one sample");
    const std::size_t s = handle.resolution();
    const std::size_t rows = (zs.size() + columns - 1) / columns;
    Tensor grid({3, rows * s, columns * s});
    for (std::size_t k = 0; k < zs.size(); ++k) {
        const Patch p = handle.generate(zs[k]);
        const std::size_t oy = (k / columns) * s, ox = (k % columns) * s;
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t y = 0; y < s; ++y) {
                for (std::size_t x = 0; x < s; ++x) grid.at(c, oy + y, ox + x) = p.pixels.at(c, y, x);
            }
        }
    }
    return grid;
}

}  // namespace natpatch
