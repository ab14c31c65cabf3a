#include "seqcl/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <set>

#include "seqcl/container.hpp"
#include "seqcl/errors.hpp"

namespace seqcl {

std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

namespace {

Eigen::VectorXd flatten(const Image& img) { return Eigen::Map<const Eigen::VectorXd>(img.data(), img.size()); }

}  // namespace

// ---------------------------------------------------------------- sine

std::vector<Example> sine_generate(const SineTaskParams& task, Index n, double amp_min, double amp_max,
                                   std::mt19937_64& rng) {
    if (n < 1) throw ConfigError("sine_generate: n must be >= 1");
    std::uniform_real_distribution<double> amp(amp_min, amp_max);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<Example> out;
    const double two_pi = 2 * std::numbers::pi;
    for (Index i = 0; i < n; ++i) {
        const double a = amp_min == amp_max ? amp_min : amp(rng);
        Example e;
        e.x.resize(task.grid_points);
        e.y.resize(task.grid_points);
        for (Index g = 0; g < task.grid_points; ++g) {
            const double tau = static_cast<double>(g) / static_cast<double>(task.grid_points);
            const double arg = two_pi * task.frequency * tau + task.phase;
            e.y(g) = a * std::sin(arg);
            e.x(g) = a * std::sin(arg + task.phase_shift) + task.noise * noise(rng);
        }
        out.push_back(std::move(e));
    }
    return out;
}

SineFamily::SineFamily(SineConfig cfg, Index universe, std::uint64_t seed)
    : cfg_(cfg), universe_(universe), seed_(seed) {}

SineTaskParams SineFamily::task_params(Index task) const {
    if (task < 0 || task >= universe_) throw LookupError("sine task " + std::to_string(task) + " outside universe");
    std::mt19937_64 rng(derive_seed(seed_, static_cast<std::uint64_t>(task)));
    std::uniform_real_distribution<double> freq(cfg_.freq_min, cfg_.freq_max);
    std::uniform_real_distribution<double> angle(0.0, 2 * std::numbers::pi);
    SineTaskParams p;
    p.frequency = freq(rng);
    p.phase = angle(rng);
    p.phase_shift = angle(rng);
    p.noise = cfg_.noise;
    p.grid_points = cfg_.grid_points;
    return p;
}

std::vector<Example> SineFamily::sample(Index task, Index n, const EpisodeContext&, std::mt19937_64& rng) const {
    auto out = sine_generate(task_params(task), n, cfg_.amp_min, cfg_.amp_max, rng);
    for (auto& e : out) e.task = task;
    return out;
}

// ---------------------------------------------------------------- glyph families

std::vector<Example> GlyphFamily::sample(Index task, Index n, const EpisodeContext&, std::mt19937_64& rng) const {
    if (task < 0 || task >= universe_) throw LookupError("glyph class " + std::to_string(task) + " outside universe");
    std::vector<Example> out;
    for (Index i = 0; i < n; ++i) {
        Example e;
        e.x = flatten(glyph_generate(class_seed(task), sample_jitter(rng)));
        e.task = task;
        out.push_back(std::move(e));
    }
    return out;
}

EpisodeContext RotationFamily::sample_context(std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> angle(0.0, 2 * std::numbers::pi);
    return {angle(rng)};
}

std::vector<Example> RotationFamily::sample(Index task, Index n, const EpisodeContext& ctx,
                                            std::mt19937_64& rng) const {
    std::uniform_real_distribution<double> angle(0.0, 2 * std::numbers::pi);
    std::vector<Example> out;
    for (Index i = 0; i < n; ++i) {
        const double psi = angle(rng);
        Example e;
        e.x = flatten(rotate(glyph_generate(glyphs_.class_seed(task), sample_jitter(rng)), psi));
        e.y.resize(2);
        e.y << std::cos(psi + ctx.angle_shift), std::sin(psi + ctx.angle_shift);
        e.task = task;
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<Example> CompletionFamily::sample(Index task, Index n, const EpisodeContext&, std::mt19937_64& rng) const {
    std::vector<Example> out;
    for (Index i = 0; i < n; ++i) {
        auto [top, bottom] = split_halves(glyph_generate(glyphs_.class_seed(task), sample_jitter(rng)));
        Example e;
        e.x = flatten(top);
        e.y = flatten(bottom);
        e.task = task;
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<Example> PrototypeFamily::sample(Index task, Index n, const EpisodeContext&, std::mt19937_64& rng) const {
    if (task < 0 || task >= universe_) throw LookupError("prototype class " + std::to_string(task) + " outside universe");
    std::mt19937_64 proto_rng(derive_seed(seed_, static_cast<std::uint64_t>(task)));
    std::normal_distribution<double> n01(0.0, 1.0);
    Eigen::VectorXd proto(dim_);
    for (Index i = 0; i < dim_; ++i) proto(i) = n01(proto_rng);
    std::vector<Example> out;
    for (Index i = 0; i < n; ++i) {
        Example e;
        e.x = proto;
        for (Index j = 0; j < dim_; ++j) e.x(j) += noise_ * n01(rng);
        e.task = task;
        out.push_back(std::move(e));
    }
    return out;
}

ImageFolderFamily::ImageFolderFamily(const std::filesystem::path& manifest, Index height, Index width)
    : height_(height), width_(width) {
    for (const auto& entry : read_class_manifest(manifest)) {
        RecordSet set = read_records(entry.file);
        if (set.elements != static_cast<std::uint64_t>(height * width))
            throw FormatError(entry.file.string() + ": records of " + std::to_string(set.elements) +
                              " elements, expected " + std::to_string(height * width));
        std::vector<Eigen::VectorXd> imgs;
        for (const auto& r : set.records) imgs.push_back(Eigen::Map<const Eigen::VectorXd>(r.data(), static_cast<Index>(r.size())));
        names_.push_back(entry.name);
        classes_.push_back(std::move(imgs));
    }
    if (classes_.empty()) throw ConfigError("image manifest " + manifest.string() + " lists no classes");
}

std::vector<Example> ImageFolderFamily::sample(Index task, Index n, const EpisodeContext&, std::mt19937_64& rng) const {
    const auto& imgs = classes_.at(static_cast<std::size_t>(task));
    if (static_cast<Index>(imgs.size()) < n)
        throw ConfigError("class " + names_[static_cast<std::size_t>(task)] + " has " + std::to_string(imgs.size()) +
                          " images, episode needs " + std::to_string(n));
    std::vector<std::size_t> idx(imgs.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<Example> out;
    for (Index i = 0; i < n; ++i) {
        Example e;
        e.x = imgs[idx[static_cast<std::size_t>(i)]];
        e.task = task;
        out.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------- splits and codes

MetaSplit build_meta_split(Index universe, double train_fraction, std::uint64_t seed, Index tasks_per_episode) {
    if (universe < 2 * tasks_per_episode)
        throw ConfigError("task universe of " + std::to_string(universe) + " is smaller than 2K = " +
                          std::to_string(2 * tasks_per_episode));
    if (!(train_fraction > 0 && train_fraction < 1)) throw ConfigError("meta-split fraction must be in (0, 1)");
    std::vector<Index> perm(static_cast<std::size_t>(universe));
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(derive_seed(seed, 0x5eed5));
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(universe)));
    MetaSplit split;
    split.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.test.begin(), split.test.end());
    if (static_cast<Index>(split.train.size()) < tasks_per_episode ||
        static_cast<Index>(split.test.size()) < tasks_per_episode)
        throw ConfigError("meta-split leaves fewer than K tasks on one side");
    return split;
}

Index ClassCodebook::available() const {
    Index n = 1;
    for (Index i = 0; i < code_length; ++i) {
        if (n > std::numeric_limits<Index>::max() / std::max<Index>(vocab, 1)) return std::numeric_limits<Index>::max();
        n *= vocab;
    }
    return n;
}

std::optional<Index> ClassCodebook::decode(std::span<const Index> code) const {
    for (std::size_t c = 0; c < codes.size(); ++c)
        if (std::equal(codes[c].begin(), codes[c].end(), code.begin(), code.end())) return static_cast<Index>(c);
    return std::nullopt;
}

ClassCodebook ClassCodebook::sample(Index classes, Index vocab, Index code_length, std::mt19937_64& rng) {
    if (vocab < 1 || code_length < 1) throw ConfigError("codebook needs vocab >= 1 and code length >= 1");
    ClassCodebook book;
    book.vocab = vocab;
    book.code_length = code_length;
    const Index total = book.available();
    if (classes > total)
        throw ConfigError("codebook: " + std::to_string(classes) + " classes exceed |V|^C = " + std::to_string(total));
    // Floyd's algorithm: uniform subset of size `classes`, then shuffled order.
    std::set<Index> chosen;
    for (Index j = total - classes; j < total; ++j) {
        std::uniform_int_distribution<Index> pick(0, j);
        const Index t = pick(rng);
        if (!chosen.insert(t).second) chosen.insert(j);
    }
    std::vector<Index> ids(chosen.begin(), chosen.end());
    std::shuffle(ids.begin(), ids.end(), rng);
    for (Index id : ids) {
        std::vector<Index> code(static_cast<std::size_t>(code_length));
        for (Index c = code_length - 1; c >= 0; --c) {
            code[static_cast<std::size_t>(c)] = id % vocab;
            id /= vocab;
        }
        book.codes.push_back(std::move(code));
    }
    return book;
}

// ---------------------------------------------------------------- episodes

Episode sample_episode(const EpisodeSpec& spec, const TaskFamily& family, std::span<const Index> pool) {
    if (spec.tasks < 1 || spec.shots_train < 1 || spec.shots_test < 1)
        throw ConfigError("episode spec needs K, shots_train and shots_test >= 1");
    if (static_cast<Index>(pool.size()) < spec.tasks)
        throw ConfigError("task pool of " + std::to_string(pool.size()) + " cannot supply K = " +
                          std::to_string(spec.tasks) + " unique tasks");
    std::mt19937_64 rng(spec.seed);
    std::vector<Index> tasks(pool.begin(), pool.end());
    std::shuffle(tasks.begin(), tasks.end(), rng);
    tasks.resize(static_cast<std::size_t>(spec.tasks));

    Episode ep;
    ep.family = family.name();
    ep.classification = family.classification();
    ep.input = family.input();
    ep.y_dim = family.y_dim();
    ep.tasks = tasks;
    ep.shots_train = spec.shots_train;
    ep.context = family.sample_context(rng);
    for (Index k = 0; k < spec.tasks; ++k) {
        auto ex = family.sample(tasks[static_cast<std::size_t>(k)], spec.shots_train + spec.shots_test, ep.context, rng);
        for (auto& e : ex) e.label = k;
        for (Index i = 0; i < spec.shots_train; ++i) ep.train.push_back(ex[static_cast<std::size_t>(i)]);
        for (Index i = spec.shots_train; i < spec.shots_train + spec.shots_test; ++i)
            ep.test.push_back(ex[static_cast<std::size_t>(i)]);
    }
    std::shuffle(ep.test.begin(), ep.test.end(), rng);
    if (ep.classification) ep.codebook = ClassCodebook::sample(spec.tasks, spec.vocab_size(), spec.code_length, rng);
    return ep;
}

// ---------------------------------------------------------------- tokens

Index TokenSequence::max_position() const {
    return positions.empty() ? -1 : *std::max_element(positions.begin(), positions.end());
}

TokenSequence assemble_tokens(const Episode& ep, const AssemblyOptions& options) {
    const Index n_tasks = static_cast<Index>(ep.tasks.size());
    const Index code_len = ep.classification ? ep.codebook.code_length : 1;
    if (ep.classification && static_cast<Index>(ep.codebook.codes.size()) < n_tasks)
        throw ConfigError("codebook names " + std::to_string(ep.codebook.codes.size()) + " of " +
                          std::to_string(n_tasks) + " classes");
    const Index xdim = ep.input.dim;
    const Index n_train = static_cast<Index>(ep.train.size());
    const Index n_test = static_cast<Index>(ep.test.size());

    TokenSequence seq;
    seq.code_length = code_len;
    seq.x_rows.resize(n_train + n_test, xdim);
    if (!ep.classification) {
        seq.y_rows.resize(n_train, ep.y_dim);
        seq.y_targets.resize(n_test, ep.y_dim);
    }
    seq.task_spans.assign(static_cast<std::size_t>(n_tasks), {-1, -1});

    // stream
    std::vector<Index> moment_end(static_cast<std::size_t>(n_tasks) + 1, 0);
    for (Index i = 0; i < n_train; ++i) {
        const Example& e = ep.train[static_cast<std::size_t>(i)];
        if (e.x.size() != xdim) throw DimensionError("episode input of width " + std::to_string(e.x.size()));
        seq.x_rows.row(i) = e.x.transpose();
        const Index begin = seq.length();
        seq.kinds.push_back(TokenKind::input);
        seq.refs.push_back(i);
        if (ep.classification) {
            for (Index c = 0; c < code_len; ++c) {
                seq.kinds.push_back(TokenKind::label);
                seq.refs.push_back(ep.codebook.codes[static_cast<std::size_t>(e.label)][static_cast<std::size_t>(c)]);
            }
        } else {
            seq.y_rows.row(i) = e.y.transpose();
            seq.kinds.push_back(TokenKind::target);
            seq.refs.push_back(i);
        }
        auto& span = seq.task_spans[static_cast<std::size_t>(e.label)];
        if (span.first < 0) span.first = begin;
        span.second = seq.length();
        moment_end[static_cast<std::size_t>(e.label) + 1] = seq.length();
    }
    seq.stream_length = seq.length();
    for (Index i = 0; i < seq.stream_length; ++i) seq.positions.push_back(i);

    // test queries
    std::mt19937_64 rng(derive_seed(options.seed, 0x7e57));
    for (Index n = 0; n < n_test; ++n) {
        const Example& e = ep.test[static_cast<std::size_t>(n)];
        seq.x_rows.row(n_train + n) = e.x.transpose();
        if (!ep.classification) seq.y_targets.row(n) = e.y.transpose();
        const Index k = e.label;
        std::vector<Index> moments;
        switch (options.placement) {
            case Placement::after_stream: moments = {n_tasks}; break;
            case Placement::mid_stream: {
                std::uniform_int_distribution<Index> pick(k + 1, n_tasks);
                moments = {pick(rng)};
                break;
            }
            case Placement::all_moments:
                for (Index m = k + 1; m <= n_tasks; ++m) moments.push_back(m);
                break;
        }
        for (Index m : moments) {
            TestQuery q;
            q.item = n;
            q.task = k;
            q.moment = m;
            q.context_end = moment_end[static_cast<std::size_t>(m)];
            const Index query_id = static_cast<Index>(seq.queries.size());
            for (Index c = 0; c < code_len; ++c) {
                const Index pos = seq.length();
                q.positions.push_back(pos);
                if (c == 0) {
                    seq.kinds.push_back(TokenKind::input);
                    seq.refs.push_back(n_train + n);
                } else {
                    seq.kinds.push_back(TokenKind::label);
                    seq.refs.push_back(ep.codebook.codes[static_cast<std::size_t>(k)][static_cast<std::size_t>(c - 1)]);
                }
                seq.positions.push_back(q.context_end + c);
                LossTarget t;
                t.position = pos;
                t.query = query_id;
                if (ep.classification)
                    t.token = ep.codebook.codes[static_cast<std::size_t>(k)][static_cast<std::size_t>(c)];
                else
                    t.y_row = n;
                seq.targets.push_back(t);
            }
            seq.queries.push_back(std::move(q));
        }
    }

    const Index len = seq.length();
    seq.mask = Mask::Constant(len, len, false);
    for (Index i = 0; i < seq.stream_length; ++i)
        for (Index j = 0; j <= i; ++j) seq.mask(i, j) = true;
    for (const auto& q : seq.queries)
        for (std::size_t a = 0; a < q.positions.size(); ++a) {
            const Index row = q.positions[a];
            for (Index j = 0; j < q.context_end; ++j) seq.mask(row, j) = true;
            for (std::size_t b = 0; b <= a; ++b) seq.mask(row, q.positions[b]) = true;
        }
    return seq;
}

void dump_episode(const Episode& ep, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto records = [](const std::vector<Example>& v, bool use_x) {
        RecordSet set;
        set.dtype = RecordDtype::f32;
        for (const auto& e : v) {
            const Eigen::VectorXd& src = use_x ? e.x : e.y;
            set.records.emplace_back(src.data(), src.data() + src.size());
        }
        set.elements = set.records.empty() ? 0 : set.records.front().size();
        return set;
    };
    write_records(dir / "train_x.bin", records(ep.train, true));
    write_records(dir / "test_x.bin", records(ep.test, true));
    if (!ep.classification) {
        write_records(dir / "train_y.bin", records(ep.train, false));
        write_records(dir / "test_y.bin", records(ep.test, false));
    }
    std::ofstream os(dir / "manifest.txt", std::ios::trunc);
    os << "family " << ep.family << '\n'
       << "classification " << (ep.classification ? 1 : 0) << '\n'
       << "tasks " << ep.tasks.size() << '\n'
       << "shots_train " << ep.shots_train << '\n'
       << "x_dim " << ep.input.dim << '\n'
       << "y_dim " << ep.y_dim << '\n'
       << std::setprecision(17) << "angle_shift " << ep.context.angle_shift << '\n';
    if (ep.classification) os << "vocab " << ep.codebook.vocab << " code_length " << ep.codebook.code_length << '\n';
    os << "# split index task label code\n";
    auto line = [&](const char* split, std::size_t i, const Example& e) {
        os << split << ' ' << i << ' ' << e.task << ' ' << e.label;
        if (ep.classification) {
            os << ' ';
            const auto& code = ep.codebook.codes[static_cast<std::size_t>(e.label)];
            for (std::size_t c = 0; c < code.size(); ++c) os << (c ? "," : "") << code[c];
        }
        os << '\n';
    };
    for (std::size_t i = 0; i < ep.train.size(); ++i) line("train", i, ep.train[i]);
    for (std::size_t i = 0; i < ep.test.size(); ++i) line("test", i, ep.test[i]);
}

std::unique_ptr<TaskFamily> make_family(const std::string& name, std::uint64_t seed, Index universe,
                                        const SineConfig& sine, Index prototype_dim, double prototype_noise,
                                        const std::filesystem::path& manifest) {
    if (name == "sine") return std::make_unique<SineFamily>(sine, universe, seed);
    if (name == "glyph") return std::make_unique<GlyphFamily>(universe, seed);
    if (name == "rotation") return std::make_unique<RotationFamily>(universe, seed);
    if (name == "completion") return std::make_unique<CompletionFamily>(universe, seed);
    if (name == "prototypes") return std::make_unique<PrototypeFamily>(prototype_dim, prototype_noise, universe, seed);
    if (name == "image_folder") {
        if (manifest.empty()) throw ConfigError("image_folder family needs a manifest path");
        return std::make_unique<ImageFolderFamily>(manifest);
    }
    throw ConfigError("unknown benchmark family '" + name +
                      "' (expected sine, glyph, rotation, completion, prototypes or image_folder)");
}

}  // namespace seqcl
