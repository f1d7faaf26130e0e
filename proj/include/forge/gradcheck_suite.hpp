#pragma once

// Finite-difference checks for every differentiable operation, both block
// wirings, and a micro vision-language model end to end.

#include <functional>
#include <string>
#include <vector>

#include "forge/gradcheck.hpp"
#include "forge/train.hpp"

namespace forge {

struct GradcheckCase {
  std::string name;
  double threshold;
  /// Returns the worst relative error for one seed.
  std::function<double(std::uint64_t seed)> run;
};

struct GradcheckResult {
  std::string name;
  double worst;
  double threshold;
  bool passed() const { return worst < threshold; }
};

namespace gc {

using Td = Tensor<double>;

inline Td random(Rng& rng, Shape shape, double scale = 1.0) {
  auto t = Td::zeros(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

inline std::vector<std::int32_t> iota(std::size_t n) {
  std::vector<std::int32_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<std::int32_t>(i);
  return v;
}

/// Checks sum(f(inputs) * R) for a fixed random R, so no output is summed
/// away symmetrically.
inline double check(std::uint64_t seed, std::vector<Td> inputs,
                    const std::function<Td(const std::vector<Td>&)>& f) {
  Rng proj(seed, "projection");
  const Td r = random(proj, f(inputs).shape());
  return gradcheck([&](const std::vector<Td>& xs) { return sum(mul(f(xs), r)); }, inputs);
}

inline BlockParams<double> random_block(Rng& rng, NormKind kind, std::size_t d, std::size_t heads,
                                        std::size_t hidden) {
  const double s = 3.0;
  BlockParams<double> b;
  b.kind = kind;
  b.attn = {random(rng, {d, d}, s), random(rng, {d, d}, s), random(rng, {d, d}, s),
            random(rng, {d, d}, s), random(rng, {d / heads}, 0.3), random(rng, {d / heads}, 0.3)};
  for (auto* g : {&b.attn.q_gain, &b.attn.k_gain})
    for (auto& v : g->data()) v += 1.0;
  b.w1 = random(rng, {d, hidden}, 0.1);
  b.w3 = random(rng, {d, hidden}, 0.1);
  b.w2 = random(rng, {hidden, d}, 0.3);
  b.norm1_gain = random(rng, {d}, 0.2);
  b.norm2_gain = random(rng, {d}, 0.2);
  for (auto* g : {&b.norm1_gain, &b.norm2_gain})
    for (auto& v : g->data()) v += 1.0;
  if (kind == NormKind::PreLayerNorm) {
    b.norm1_bias = random(rng, {d}, 0.1);
    b.norm2_bias = random(rng, {d}, 0.1);
  }
  return b;
}

inline std::vector<Td*> block_tensors(BlockParams<double>& b) {
  std::vector<Td*> out{&b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo, &b.attn.q_gain,
                       &b.attn.k_gain, &b.w1, &b.w3, &b.w2, &b.norm1_gain, &b.norm2_gain};
  if (b.kind == NormKind::PreLayerNorm) {
    out.push_back(&b.norm1_bias);
    out.push_back(&b.norm2_bias);
  }
  return out;
}

inline double block_case(std::uint64_t seed, NormKind kind) {
  Rng rng(seed, "block");
  const std::size_t n = 5, d = 8, heads = 2;
  auto block = random_block(rng, kind, d, heads, 12);
  const auto pos = iota(n);
  const auto ctx = make_rope_context(10000.0, d / heads, 16, 16);
  SequenceLayout<double> layout{{{0, 3}, {3, 2}}, rope_table_1d<double>(pos, ctx), true};
  auto x = random(rng, {n, d}, 10.0);
  auto params = block_tensors(block);
  std::vector<Td> inputs{x};
  for (auto* p : params) inputs.push_back(*p);
  return check(seed, inputs, [&](const std::vector<Td>&) {
    return block_forward(x, block, heads, layout, true);
  });
}

/// Micro model (width 8, one encoder and one decoder layer) on one image and
/// one text-only example. Query/key weights feed a scale-invariant norm and the
/// projector output feeds the decoder's RMS norms, so those groups are scaled
/// up; a step of 1e-3 then moves each nonlinearity only a little.
inline double end_to_end_case(std::uint64_t seed) {
  ModelConfig cfg = preset("micro");
  cfg.init_std = 0.35;
  VlmModel<double> model(cfg, seed);
  for (auto& p : model.parameters()) {
    double k = 1.0;
    if (p.name.find("attn.wq") != std::string::npos || p.name.find("attn.wk") != std::string::npos) k = 10.0;
    if (p.name.find("patch_embed") != std::string::npos || p.name == "encoder.pos_bias") k = 0.5;
    if (p.name == "projector.w1") k = 3.0;
    if (p.name == "projector.w2") k = 10.0;
    for (auto& v : p.value.data()) v *= k;
  }
  GlyphParams gp;
  gp.image_size = cfg.image_size;
  gp.n_glyphs = 1;
  gp.min_scale = 1;
  gp.max_scale = 1;
  gp.glyph_set_size = cfg.vocab_size - SpecialTokens::count;
  std::vector<Example> batch{glyph_example(gen_glyph_sample(seed, gp))};
  Example text;
  text.prompt = {3, 4};
  text.response = {5, 6, SpecialTokens::eos};
  batch.push_back(text);
  std::vector<Td> params;
  for (const auto& p : model.parameters()) params.push_back(p.value);
  return gradcheck([&](const std::vector<Td>&) { return vlm_forward(model, batch).loss; }, params);
}

}  // namespace gc

inline std::vector<GradcheckCase> gradcheck_cases() {
  using namespace gc;
  std::vector<GradcheckCase> cases;
  auto add_case = [&](std::string name, std::function<double(std::uint64_t)> f, double thr = 1e-4) {
    cases.push_back({std::move(name), thr, std::move(f)});
  };
  auto unary = [&](std::string name, std::function<Td(const Td&)> op, double scale = 1.0) {
    add_case(std::move(name), [op, scale](std::uint64_t seed) {
      Rng rng(seed, "unary");
      return check(seed, {random(rng, {3, 4}, scale)}, [&](const std::vector<Td>& x) { return op(x[0]); });
    });
  };
  auto binary = [&](std::string name, std::function<Td(const Td&, const Td&)> op, Shape a, Shape b) {
    add_case(std::move(name), [op, a, b](std::uint64_t seed) {
      Rng rng(seed, "binary");
      return check(seed, {random(rng, a), random(rng, b)},
                   [&](const std::vector<Td>& x) { return op(x[0], x[1]); });
    });
  };

  binary("matmul", [](const Td& a, const Td& b) { return matmul(a, b); }, {4, 4}, {4, 4});
  binary("add", [](const Td& a, const Td& b) { return add(a, b); }, {3, 4}, {3, 4});
  binary("subtract", [](const Td& a, const Td& b) { return sub(a, b); }, {3, 4}, {3, 4});
  binary("multiply", [](const Td& a, const Td& b) { return mul(a, b); }, {3, 4}, {3, 4});
  binary("add_bias", [](const Td& a, const Td& b) { return add_bias(a, b); }, {3, 4}, {4});
  unary("scale", [](const Td& x) { return scale(x, 2.5); });
  unary("sum", [](const Td& x) { return sum(x); });
  unary("mean", [](const Td& x) { return mean(x); });
  unary("variance", [](const Td& x) { return variance(x); });
  unary("reshape", [](const Td& x) { return reshape(x, {2, 6}); });
  unary("transpose", [](const Td& x) { return transpose(x); });
  unary("slice", [](const Td& x) { return slice(x, 1, 1, 2); });
  unary("softmax", [](const Td& x) { return softmax(x, 1); });
  unary("sigmoid", [](const Td& x) { return sigmoid(x); });
  unary("softplus", [](const Td& x) { return softplus(x); });
  unary("silu", [](const Td& x) { return silu(x); });
  binary("concat", [](const Td& a, const Td& b) { return concat<double>({a, b}, 1); }, {3, 2}, {3, 3});
  add_case("embedding", [](std::uint64_t seed) {
    Rng rng(seed, "embedding");
    const std::vector<std::int32_t> ids{2, 0, 2, 4};
    return check(seed, {random(rng, {5, 3})}, [&](const std::vector<Td>& x) {
      return embedding(x[0], std::span<const std::int32_t>(ids));
    });
  });
  add_case("softmax+cross_entropy", [](std::uint64_t seed) {
    Rng rng(seed, "xent");
    const std::vector<std::int32_t> targets{1, 4, 0};
    const std::vector<std::uint8_t> mask{1, 0, 1};
    auto logits = random(rng, {3, 5});
    return gradcheck([&](const std::vector<Td>& x) {
      return cross_entropy(x[0], std::span<const std::int32_t>(targets), std::span<const std::uint8_t>(mask));
    }, {logits});
  });
  add_case("layer_norm", [](std::uint64_t seed) {
    Rng rng(seed, "ln");
    return check(seed, {random(rng, {3, 6}), random(rng, {6}), random(rng, {6})},
                 [](const std::vector<Td>& x) { return layer_norm(x[0], x[1], x[2]); });
  });
  add_case("rms_norm", [](std::uint64_t seed) {
    Rng rng(seed, "rms");
    return check(seed, {random(rng, {3, 6}, 10.0), random(rng, {6})},
                 [](const std::vector<Td>& x) { return rms_norm(x[0], x[1]); });
  });
  add_case("swiglu_ffn", [](std::uint64_t seed) {
    Rng rng(seed, "swiglu");
    return check(seed, {random(rng, {2, 4}), random(rng, {4, 8}, 0.5), random(rng, {4, 8}, 0.5), random(rng, {8, 4}, 0.5)},
                 [](const std::vector<Td>& x) { return swiglu_ffn(x[0], x[1], x[2], x[3]); });
  });
  add_case("qk_normalize", [](std::uint64_t seed) {
    Rng rng(seed, "qk");
    return check(seed, {random(rng, {3, 8}, 10.0), random(rng, {3, 8}, 10.0), random(rng, {4}), random(rng, {4})},
                 [](const std::vector<Td>& x) {
                   auto [q, k] = qk_normalize(x[0], x[1], x[2], x[3]);
                   return concat<double>({q, k});
                 });
  });
  add_case("rope_1d", [](std::uint64_t seed) {
    Rng rng(seed, "rope1");
    const std::vector<std::int32_t> pos{0, 3, 7};
    const auto ctx = make_rope_context(10000.0, 4, 8, 8);
    return check(seed, {random(rng, {3, 8})}, [&](const std::vector<Td>& x) {
      return rope_1d(x[0], std::span<const std::int32_t>(pos), ctx);
    });
  });
  add_case("rope_2d", [](std::uint64_t seed) {
    Rng rng(seed, "rope2");
    const std::vector<std::int32_t> rows{0, 0, 1, 1}, cols{0, 1, 0, 1};
    const auto ctx = make_rope_context(10000.0, 8, 8, 8);
    return check(seed, {random(rng, {4, 8})}, [&](const std::vector<Td>& x) {
      return rope_2d(x[0], std::span<const std::int32_t>(rows), std::span<const std::int32_t>(cols), ctx);
    });
  });
  add_case("abs_pos_bias", [](std::uint64_t seed) {
    Rng rng(seed, "bias");
    return check(seed, {random(rng, {4, 3})}, [](const std::vector<Td>& x) {
      return abs_pos_bias(3, 3, PosBiasTable<double>{2, 2, x[0]});
    });
  });
  add_case("attention", [](std::uint64_t seed) {
    Rng rng(seed, "attn");
    const std::vector<Segment> segs{{0, 3}, {3, 2}};
    return check(seed, {random(rng, {5, 4}), random(rng, {5, 4}), random(rng, {5, 4})},
                 [&](const std::vector<Td>& x) { return scaled_dot_attention(x[0], x[1], x[2], 2, segs, true); });
  });
  add_case("mha_forward", [](std::uint64_t seed) {
    Rng rng(seed, "mha");
    const std::size_t d = 8;
    AttentionParams<double> p{random(rng, {d, d}, 3.0), random(rng, {d, d}, 3.0), random(rng, {d, d}, 0.4),
                              random(rng, {d, d}, 0.4), random(rng, {4}, 0.2), random(rng, {4}, 0.2)};
    for (auto* g : {&p.q_gain, &p.k_gain})
      for (auto& v : g->data()) v += 1.0;
    const std::vector<std::int32_t> rows{0, 0, 1, 1}, cols{0, 1, 0, 1};
    SequenceLayout<double> layout{{{0, 4}}, rope_table_2d<double>(rows, cols, make_rope_context(100.0, 4, 4, 4)), false};
    auto x = random(rng, {4, d}, 10.0);
    return check(seed, {x, p.wq, p.wk, p.wv, p.wo, p.q_gain, p.k_gain},
                 [&](const std::vector<Td>&) { return mha_forward(x, p, 2, layout, true); });
  });
  add_case("block_pre_layernorm", [](std::uint64_t seed) { return block_case(seed, NormKind::PreLayerNorm); });
  add_case("block_post_rmsnorm", [](std::uint64_t seed) { return block_case(seed, NormKind::PostRMSNorm); });
  add_case("embed_patches", [](std::uint64_t seed) {
    Rng rng(seed, "patch");
    const PatchPlan plan{14, 28, 28, 2, 2};
    std::map<std::size_t, PatchEmbedding<double>> emb;
    emb[14] = {random(rng, {14 * 14 * 3, 4}, 0.1), random(rng, {4})};
    PosBiasTable<double> table{3, 3, random(rng, {9, 4})};
    auto patches = random(rng, {4, 14 * 14 * 3});
    return check(seed, {patches, emb[14].weight, emb[14].bias, table.table}, [&](const std::vector<Td>&) {
      return embed_patches(patches, emb, plan, table).tokens;
    });
  });
  add_case("project_visual", [](std::uint64_t seed) {
    Rng rng(seed, "proj");
    return check(seed, {random(rng, {3, 4}), random(rng, {4, 6}, 0.5), random(rng, {6, 6}, 0.5)},
                 [](const std::vector<Td>& x) { return project_visual(x[0], x[1], x[2]); });
  });
  add_case("dpo_loss", [](std::uint64_t seed) {
    Rng rng(seed, "dpo");
    return gradcheck([](const std::vector<Td>& x) { return dpo_loss(x[0], x[1], x[2], x[3], 0.5); },
                     {random(rng, {3}), random(rng, {3}), random(rng, {3}), random(rng, {3})});
  });
  add_case("end_to_end_micro_vlm", end_to_end_case, 1e-3);
  return cases;
}

/// Worst error per case over seeds 0..seeds-1.
inline std::vector<GradcheckResult> run_gradcheck_suite(std::size_t seeds = 10) {
  std::vector<GradcheckResult> results;
  for (const auto& c : gradcheck_cases()) {
    double worst = 0;
    for (std::uint64_t s = 0; s < seeds; ++s) worst = std::max(worst, c.run(s + 1));
    results.push_back({c.name, worst, c.threshold});
  }
  return results;
}

}  // namespace forge
