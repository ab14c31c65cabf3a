#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "seqcl/checkpoint.hpp"
#include "seqcl/episodes.hpp"
#include "seqcl/errors.hpp"
#include "seqcl/model.hpp"

using namespace seqcl;

namespace {

ModelConfig tiny_config(Backend backend, Index input_dim, Index vocab, Index y_dim = 0) {
    ModelConfig c;
    c.transformer.n_layers = 2;
    c.transformer.d_model = 16;
    c.transformer.n_heads = 2;
    c.transformer.d_head = 8;
    c.transformer.d_mlp = 32;
    c.transformer.backend = backend;
    c.transformer.dropout = 0.0;
    c.transformer.max_len = 256;
    c.input = InputSchema::vector_of(input_dim);
    c.encoder.hidden = 24;
    c.vocab = vocab;
    c.y_dim = y_dim;
    return c;
}

std::vector<Index> pool(Index n) {
    std::vector<Index> v(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i;
    return v;
}

Episode proto_episode(Index tasks, Index shots_test, Index code_length, Index vocab, std::uint64_t seed) {
    static PrototypeFamily fam(6, 0.3, 40, 5);
    EpisodeSpec spec;
    spec.tasks = tasks;
    spec.shots_test = shots_test;
    spec.code_length = code_length;
    spec.vocab = vocab;
    spec.seed = seed;
    return sample_episode(spec, fam, pool(40));
}

double max_abs(const Mat<double>& a) { return a.size() ? a.cwiseAbs().maxCoeff() : 0.0; }

const Backend kBackends[] = {Backend::softmax, Backend::linear, Backend::performer};

}  // namespace

TEST_CASE("config validation and presets") {
    auto t = TransformerConfig::preset("transformer");
    CHECK(t.n_layers == 4);
    CHECK(t.d_model == 512);
    CHECK(t.n_heads == 8);
    CHECK(t.d_head == 64);
    CHECK(t.d_mlp == 1024);
    CHECK(TransformerConfig::preset("xl").d_model == 1024);
    CHECK(TransformerConfig::preset("small").n_heads * TransformerConfig::preset("small").d_head == 256);
    CHECK_THROWS_AS(TransformerConfig::preset("huge"), ConfigError);
    t.n_heads = 7;
    CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("encoders: shapes, finiteness, determinism") {
    Model<double> mlp(tiny_config(Backend::softmax, 50, 5), 1);
    Mat<double> zeros = Mat<double>::Zero(1, 50);
    Mat<double> e = mlp.encode_rows(zeros);
    CHECK(e.rows() == 1);
    CHECK(e.cols() == 16);
    CHECK(e.allFinite());
    CHECK_THROWS_AS(mlp.encode_rows(Mat<double>::Zero(1, 49)), DimensionError);

    ModelConfig cc = tiny_config(Backend::softmax, 1024, 5);
    cc.input = InputSchema::image_of(32, 32);
    cc.encoder.kind = EncoderKind::cnn;
    cc.encoder.channels = {4, 8, 8, 8, 8};
    Model<double> cnn(cc, 2);
    Image g = glyph_generate(7);
    Mat<double> two(2, 1024);
    two.row(0) = Eigen::Map<const RowVec<double>>(g.data(), 1024);
    two.row(1) = two.row(0);
    Mat<double> ce = cnn.encode_rows(two);
    CHECK(ce.rows() == 2);
    CHECK(ce.cols() == 16);
    CHECK(ce.allFinite());
    CHECK(max_abs(ce.row(0) - ce.row(1)) < 1e-12);
    // 32 -> 32 -> 16 -> 8 -> 4 -> 2
    CHECK(cnn.params().at("encoder.project.weight").value.rows() == 8 * 2 * 2);
}

TEST_CASE("parallel and recurrent forms agree on full episodes") {
    for (Backend b : kBackends) {
        CAPTURE(to_string(b));
        Model<double> model(tiny_config(b, 6, 20), 3);
        Episode ep = proto_episode(20, 1, 1, 20, 4);
        TokenSequence seq = assemble_tokens(ep);
        CHECK(seq.length() == 220);
        Tape<double> tape(false);
        auto fwd = model.forward(tape, seq);
        const Mat<double> logits = model.logits(fwd.hidden).value();

        LearnerState<double> state(model);
        Index t = 0;
        double worst = 0;
        for (const auto& ex : ep.train) {
            RowVec<double> h = step_token(model, state, model.embed_input(ex.x));
            worst = std::max(worst, max_abs(h - fwd.hidden.value().row(t++)));
            for (Index v : ep.codebook.codes[static_cast<std::size_t>(ex.label)]) {
                h = step_token(model, state, model.embed_label(v));
                worst = std::max(worst, max_abs(h - fwd.hidden.value().row(t++)));
            }
        }
        CHECK(state.position() == 200);
        const auto before = state.checksum();
        for (const auto& q : seq.queries) {
            auto pred = predict_test(model, state, ep.test[static_cast<std::size_t>(q.item)].x);
            RowVec<double> z = logits.row(q.positions[0]);
            RowVec<double> p = (z.array() - z.maxCoeff()).exp();
            p /= p.sum();
            worst = std::max(worst, max_abs(pred.distribution - p));
            CHECK(pred.distribution.sum() == doctest::Approx(1.0).epsilon(1e-12));
        }
        CHECK(state.checksum() == before);
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("agreement with two-token codes and regression targets") {
    for (Backend b : kBackends) {
        CAPTURE(to_string(b));
        Model<double> model(tiny_config(b, 6, 4), 5);
        Episode ep = proto_episode(8, 2, 2, 4, 9);
        TokenSequence seq = assemble_tokens(ep, {Placement::all_moments, 0});
        Tape<double> tape(false);
        const Mat<double> hidden = model.forward(tape, seq).hidden.value();

        // replay the stream, snapshot the state at each moment
        std::vector<LearnerState<double>> at_moment{LearnerState<double>(model)};
        LearnerState<double> state(model);
        for (std::size_t i = 0; i < ep.train.size(); ++i) {
            learn_example(model, state, ep.train[i], &ep.codebook);
            if ((i + 1) % 5 == 0) at_moment.push_back(state);
        }
        double worst = 0;
        for (const auto& q : seq.queries) {
            LearnerState<double> s = at_moment[static_cast<std::size_t>(q.moment)];
            const Example& e = ep.test[static_cast<std::size_t>(q.item)];
            RowVec<double> h = step_token(model, s, model.embed_input(e.x));
            worst = std::max(worst, max_abs(h - hidden.row(q.positions[0])));
            h = step_token(model, s, model.embed_label(ep.codebook.codes[static_cast<std::size_t>(e.label)][0]));
            worst = std::max(worst, max_abs(h - hidden.row(q.positions[1])));
        }
        CHECK(worst < 1e-6);

        SineFamily sine({}, 20, 1);
        EpisodeSpec rs;
        rs.tasks = 4;
        rs.seed = 2;
        Episode rep = sample_episode(rs, sine, pool(20));
        Model<double> reg(tiny_config(b, 50, 0, 50), 6);
        TokenSequence rseq = assemble_tokens(rep);
        Tape<double> rt(false);
        const Mat<double> out = reg.regress(reg.forward(rt, rseq).hidden).value();
        LearnerState<double> rstate(reg);
        for (const auto& ex : rep.train) learn_example(reg, rstate, ex, nullptr);
        double rworst = 0;
        for (const auto& q : rseq.queries) {
            auto pred = predict_test(reg, rstate, rep.test[static_cast<std::size_t>(q.item)].x);
            rworst = std::max(rworst, max_abs(pred.regression - out.row(q.positions[0])));
        }
        CHECK(rworst < 1e-6);
    }
}

TEST_CASE("greedy decoding feeds emitted tokens back") {
    Model<double> model(tiny_config(Backend::softmax, 6, 4), 8);
    Episode ep = proto_episode(6, 1, 3, 4, 1);
    LearnerState<double> state(model);
    for (const auto& ex : ep.train) learn_example(model, state, ex, &ep.codebook);
    const Eigen::VectorXd& x = ep.test[0].x;
    auto pred = predict_test(model, state, x, 3);
    REQUIRE(pred.code.size() == 3);

    LearnerState<double> s = state;
    RowVec<double> h = step_token(model, s, model.embed_input(x));
    for (Index c = 0; c < 3; ++c) {
        Index best = 0;
        model.logits(h).maxCoeff(&best);
        CHECK(best == pred.code[static_cast<std::size_t>(c)]);
        h = step_token(model, s, model.embed_label(best));
    }
}

TEST_CASE("predict_test is order independent") {
    Model<double> model(tiny_config(Backend::linear, 6, 5), 8);
    Episode ep = proto_episode(5, 2, 1, 5, 3);
    LearnerState<double> state(model);
    for (const auto& ex : ep.train) learn_example(model, state, ex, &ep.codebook);
    auto a1 = predict_test(model, state, ep.test[0].x);
    auto b1 = predict_test(model, state, ep.test[1].x);
    auto b2 = predict_test(model, state, ep.test[1].x);
    auto a2 = predict_test(model, state, ep.test[0].x);
    CHECK(a1.distribution == a2.distribution);
    CHECK(b1.distribution == b2.distribution);
}

TEST_CASE("state size: softmax grows, kernel states are constant") {
    auto run = [](Backend b, Index tokens) {
        Model<double> model(tiny_config(b, 6, 5), 1);
        LearnerState<double> s(model);
        for (Index t = 0; t < tokens; ++t) step_token(model, s, model.embed_label(t % 5));
        return s;
    };
    auto s = run(Backend::softmax, 37);
    CHECK(s.softmax_head(0, 0).pairs() == 37);
    CHECK(s.softmax_head(1, 1).pairs() == 37);
    CHECK(run(Backend::linear, 1).bytes() == run(Backend::linear, 90).bytes());
    CHECK(run(Backend::performer, 1).bytes() == run(Backend::performer, 90).bytes());
    CHECK(run(Backend::performer, 3).kernel_head(0, 1).steps() == 3);
}

TEST_CASE("positional capacity") {
    auto cfg = tiny_config(Backend::softmax, 6, 5);
    cfg.transformer.max_len = 8;
    Model<double> soft(cfg, 1);
    LearnerState<double> s(soft);
    for (int t = 0; t < 8; ++t) step_token(soft, s, soft.embed_label(0));
    CHECK_THROWS_AS(step_token(soft, s, soft.embed_label(0)), CapacityError);

    cfg.transformer.backend = Backend::linear;
    Model<double> lin(cfg, 1);
    LearnerState<double> k(lin);
    for (int t = 0; t < 30; ++t) step_token(lin, k, lin.embed_label(1));
    CHECK(k.position() == 30);
    CHECK(lin.position_row(19) == 3);

    Episode ep = proto_episode(5, 1, 1, 5, 2);
    TokenSequence seq = assemble_tokens(ep);
    Tape<double> tape(false);
    CHECK_THROWS_AS(soft.forward(tape, seq), CapacityError);
    CHECK_NOTHROW(lin.forward(tape, seq));
}

TEST_CASE("causality of the parallel form") {
    for (Backend b : kBackends) {
        Model<double> model(tiny_config(b, 6, 5), 2);
        Episode ep = proto_episode(5, 1, 1, 5, 6);
        TokenSequence seq = assemble_tokens(ep);
        Tape<double> t1(false);
        const Mat<double> h1 = model.forward(t1, seq).hidden.value();

        TokenSequence alt = seq;
        const Index cut = 23;
        for (Index i = cut + 1; i < seq.stream_length; ++i)
            if (alt.kinds[static_cast<std::size_t>(i)] == TokenKind::label)
                alt.refs[static_cast<std::size_t>(i)] = (alt.refs[static_cast<std::size_t>(i)] + 1) % 5;
        alt.x_rows.bottomRows(alt.x_rows.rows() - 12).array() += 1.0;  // rows 12.. sit after the cut
        Tape<double> t2(false);
        const Mat<double> h2 = model.forward(t2, alt).hidden.value();
        CHECK(h1.topRows(cut + 1) == h2.topRows(cut + 1));
        CHECK(max_abs(h1.row(cut + 2) - h2.row(cut + 2)) > 0);

        // a one-token sequence matches one recurrent step
        TokenSequence one;
        one.kinds = {TokenKind::label};
        one.refs = {3};
        one.positions = {0};
        one.mask = causal_mask(1);
        one.x_rows.resize(0, 6);
        Tape<double> t3(false);
        const Mat<double> h3 = model.forward(t3, one).hidden.value();
        LearnerState<double> s(model);
        CHECK(max_abs(h3.row(0) - step_token(model, s, model.embed_label(3))) < 1e-12);
    }
}

TEST_CASE("meta-gradient matches finite differences") {
    for (Backend b : kBackends) {
        CAPTURE(to_string(b));
        auto cfg = tiny_config(b, 6, 4);
        cfg.transformer.n_layers = 1;
        Model<double> model(cfg, 11);
        Episode ep = proto_episode(4, 1, 1, 4, 7);
        TokenSequence seq = assemble_tokens(ep);
        std::vector<Index> pos, tok;
        for (const auto& t : seq.targets) {
            pos.push_back(t.position);
            tok.push_back(t.token);
        }
        auto loss_of = [&](Model<double>& m, GradBuffer<double>* grads) {
            Tape<double> tape(grads != nullptr);
            auto fwd = m.forward(tape, seq);
            Var<double> loss = sum(cross_entropy(m.logits(gather_rows(fwd.hidden, pos)), tok));
            if (grads) {
                tape.backward(loss);
                tape.accumulate_param_grads(*grads);
            }
            return loss.item();
        };
        GradBuffer<double> grads = model.params().zero_grads();
        loss_of(model, &grads);

        std::mt19937_64 rng(1);
        double worst = 0;
        for (std::size_t i = 0; i < model.params().size(); ++i) {
            auto& p = model.params()[i];
            if (!p.trainable) {
                CHECK(grads[i].norm() == 0.0);
                continue;
            }
            std::uniform_int_distribution<Index> pick(0, p.value.size() - 1);
            for (int s = 0; s < 3; ++s) {
                const Index j = pick(rng);
                const double orig = p.value.data()[j];
                const double h = 1e-5;
                p.value.data()[j] = orig + h;
                const double up = loss_of(model, nullptr);
                p.value.data()[j] = orig - h;
                const double down = loss_of(model, nullptr);
                p.value.data()[j] = orig;
                const double fd = (up - down) / (2 * h);
                const double an = grads[i].data()[j];
                worst = std::max(worst, std::abs(fd - an) / std::max(1e-4, std::abs(fd) + std::abs(an)));
            }
        }
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("dropout only when training") {
    auto cfg = tiny_config(Backend::softmax, 6, 5);
    cfg.transformer.dropout = 0.3;
    Model<double> model(cfg, 1);
    Episode ep = proto_episode(5, 1, 1, 5, 2);
    TokenSequence seq = assemble_tokens(ep);
    Tape<double> a(false), b(false), c(false);
    std::mt19937_64 rng(0);
    const Mat<double> h_eval = model.forward(a, seq).hidden.value();
    const Mat<double> h_eval2 = model.forward(b, seq).hidden.value();
    const Mat<double> h_train = model.forward(c, seq, {true, &rng, false}).hidden.value();
    CHECK(h_eval == h_eval2);
    CHECK(max_abs(h_eval - h_train) > 1e-3);
    Tape<double> d(false);
    CHECK_THROWS_AS(model.forward(d, seq, {true, nullptr, false}), ContractError);
}

TEST_CASE("checkpoint round trip and errors") {
    auto dir = std::filesystem::temp_directory_path() / "seqcl_test_ckpt";
    std::filesystem::create_directories(dir);
    auto cfg = tiny_config(Backend::performer, 6, 5);
    Model<float> trained(cfg, 4);
    save_checkpoint(dir / "m.ckpt", trained.params(), "{\"note\": 1}");

    auto info = read_checkpoint_info(dir / "m.ckpt");
    CHECK(info.metadata == "{\"note\": 1}");
    CHECK(info.entries.size() == trained.params().size());
    CHECK(info.entries[0].dtype == "f32");

    Model<float> fresh(cfg, 99);
    CHECK(fresh.params().checksum() != trained.params().checksum());
    load_checkpoint(dir / "m.ckpt", fresh.params());
    CHECK(fresh.params().checksum() == trained.params().checksum());

    Model<double> wide(cfg, 99);
    load_checkpoint(dir / "m.ckpt", wide.params());
    CHECK(wide.params().at("layer0.attn.features").value.cast<float>() ==
          trained.params().at("layer0.attn.features").value);

    auto other = cfg;
    other.transformer.d_mlp = 48;
    Model<float> mismatch(other, 1);
    CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt", mismatch.params()), FormatError);
    CHECK_THROWS_AS(Model<float>::from_params(other, trained.params()), FormatError);

    Model<double> cast = trained.cast<double>();
    CHECK(cast.params().size() == trained.params().size());
    CHECK(!cast.params().at("layer1.attn.features").trainable);
}
