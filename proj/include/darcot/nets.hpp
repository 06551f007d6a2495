#pragma once

// The parameterized transport map: a U-shaped generator conditioned on
// multi-scale residual embeddings from the REGM, plus the scalar potential
// network. All forwards are batched [N,3,H,W]; single-image overloads wrap.

#include <optional>
#include <string>
#include <vector>

#include "darcot/ops.hpp"

namespace darcot::nets {

enum class Conditioning { none, x0, r0, full };

inline const char* conditioning_name(Conditioning c) {
  switch (c) {
    case Conditioning::none: return "none";
    case Conditioning::x0: return "x0";
    case Conditioning::r0: return "r0";
    case Conditioning::full: return "full";
  }
  return "?";
}
inline Conditioning conditioning_from_name(const std::string& s) {
  if (s == "none") return Conditioning::none;
  if (s == "x0") return Conditioning::x0;
  if (s == "r0") return Conditioning::r0;
  if (s == "full") return Conditioning::full;
  fail_contract("unknown conditioning mode '", s, "'");
}

struct ModelConfig {
  int gen_base = 16;   // generator width C; scales use C, 2C, 4C
  int regm_c3 = 64;    // dense-scale embedding channels (H/4)
  int regm_c2 = 32;    // mid-scale (H/2)
  int regm_c1 = 16;    // finest scale (H)
  int pot_base = 16;   // potential width
  Conditioning conditioning = Conditioning::full;

  void validate() const {
    DARCOT_REQUIRE(gen_base >= 2 && pot_base >= 2 && regm_c3 >= 4 &&
                       regm_c2 >= 2 && regm_c1 >= 1,
                   "ModelConfig: widths too small");
    DARCOT_REQUIRE(regm_c3 % 4 == 0, "ModelConfig: regm_c3 must be divisible by 4");
  }
};

// Named parameter list; the registry every module reports into so the
// optimizer and checkpoints see a stable flat view.
template <class S>
struct ParamList {
  std::vector<std::pair<std::string, Tensor<S>>> items;
  void add(const std::string& name, const Tensor<S>& t) { items.emplace_back(name, t); }
};

namespace detail {

// LeCun-uniform fan-in initialization; deterministic in (seed, name).
template <class S>
Tensor<S> init_uniform(Shape shape, int64_t fan_in, uint64_t seed, const std::string& name) {
  Rng rng = Rng::substream(seed, name);
  double a = std::sqrt(3.0 / double(fan_in));
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  for (auto& v : t.mut_data()) v = S(rng.uniform(-a, a));
  return t;
}

}  // namespace detail

template <class S>
struct Conv {
  Tensor<S> w, b;
  int64_t stride = 1, pad = 1;

  static Conv make(int64_t cin, int64_t cout, int64_t k, int64_t stride, int64_t pad,
                   uint64_t seed, const std::string& name, bool zero_init = false) {
    Conv c;
    c.stride = stride;
    c.pad = pad;
    c.w = zero_init ? Tensor<S>::zeros({cout, cin, k, k})
                    : detail::init_uniform<S>({cout, cin, k, k}, cin * k * k, seed, name);
    c.b = Tensor<S>::zeros({cout});
    return c;
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    return ops::conv2d(x, w, b, stride, pad);
  }

  void collect(ParamList<S>& out, const std::string& name) const {
    out.add(name + ".w", w);
    out.add(name + ".b", b);
  }
};

template <class S>
struct DwConv {
  Tensor<S> w, b;

  static DwConv make(int64_t c, int64_t k, uint64_t seed, const std::string& name) {
    DwConv d;
    d.w = detail::init_uniform<S>({c, k, k}, k * k, seed, name);
    d.b = Tensor<S>::zeros({c});
    return d;
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    return ops::depthwise_conv2d(x, w, b, w.dim(1) / 2);
  }

  void collect(ParamList<S>& out, const std::string& name) const {
    out.add(name + ".w", w);
    out.add(name + ".b", b);
  }
};

// conv -> gelu -> conv with an identity skip; zeroed weights give the identity.
template <class S>
struct ResBlock {
  Conv<S> c1, c2;

  static ResBlock make(int64_t c, uint64_t seed, const std::string& name) {
    ResBlock b;
    b.c1 = Conv<S>::make(c, c, 3, 1, 1, seed, name + ".c1");
    b.c2 = Conv<S>::make(c, c, 3, 1, 1, seed, name + ".c2");
    return b;
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    return ops::add(c2(ops::gelu(c1(x))), x);
  }

  void collect(ParamList<S>& out, const std::string& name) const {
    c1.collect(out, name + ".c1");
    c2.collect(out, name + ".c2");
  }
};

// Single-head transposed channel attention. Q/K/V are pointwise-then-
// depthwise convs; attention is softmax(Q^ K^T / alpha) over C x C with
// row-normalized Q^, K^ and a learnable temperature alpha.
template <class S>
struct MdtaBlock {
  Conv<S> pq, pk, pv;
  DwConv<S> dq, dk, dv;
  Conv<S> out;
  Tensor<S> alpha;

  static MdtaBlock make(int64_t c, uint64_t seed, const std::string& name) {
    MdtaBlock m;
    m.pq = Conv<S>::make(c, c, 1, 1, 0, seed, name + ".pq");
    m.pk = Conv<S>::make(c, c, 1, 1, 0, seed, name + ".pk");
    m.pv = Conv<S>::make(c, c, 1, 1, 0, seed, name + ".pv");
    m.dq = DwConv<S>::make(c, 3, seed, name + ".dq");
    m.dk = DwConv<S>::make(c, 3, seed, name + ".dk");
    m.dv = DwConv<S>::make(c, 3, seed, name + ".dv");
    m.out = Conv<S>::make(c, c, 1, 1, 0, seed, name + ".out");
    m.alpha = Tensor<S>::scalar(S(1));
    return m;
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<S> q = ops::reshape(dq(pq(x)), {n, c, hw});
    Tensor<S> k = ops::reshape(dk(pk(x)), {n, c, hw});
    Tensor<S> v = ops::reshape(dv(pv(x)), {n, c, hw});
    q = ops::l2_normalize_rows(q);
    k = ops::l2_normalize_rows(k);
    Tensor<S> logits = ops::div(ops::bmm(q, k, false, true), alpha);  // [n,c,c]
    Tensor<S> attn = ops::softmax(logits);
    Tensor<S> mixed = ops::reshape(ops::bmm(attn, v), x.shape());
    return ops::add(out(mixed), x);
  }

  void collect(ParamList<S>& o, const std::string& name) const {
    pq.collect(o, name + ".pq");
    pk.collect(o, name + ".pk");
    pv.collect(o, name + ".pv");
    dq.collect(o, name + ".dq");
    dk.collect(o, name + ".dk");
    dv.collect(o, name + ".dv");
    out.collect(o, name + ".out");
    o.add(name + ".alpha", alpha);
  }
};

// Gated feedforward: out(gelu(DW1(P1 x)) * DW2(P2 x)) + x, expansion 2.
template <class S>
struct GdfnBlock {
  Conv<S> p1, p2;
  DwConv<S> d1, d2;
  Conv<S> out;

  static GdfnBlock make(int64_t c, uint64_t seed, const std::string& name) {
    GdfnBlock g;
    g.p1 = Conv<S>::make(c, 2 * c, 1, 1, 0, seed, name + ".p1");
    g.p2 = Conv<S>::make(c, 2 * c, 1, 1, 0, seed, name + ".p2");
    g.d1 = DwConv<S>::make(2 * c, 3, seed, name + ".d1");
    g.d2 = DwConv<S>::make(2 * c, 3, seed, name + ".d2");
    g.out = Conv<S>::make(2 * c, c, 1, 1, 0, seed, name + ".out");
    return g;
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    return ops::add(out(ops::mul(ops::gelu(d1(p1(x))), d2(p2(x)))), x);
  }

  void collect(ParamList<S>& o, const std::string& name) const {
    p1.collect(o, name + ".p1");
    p2.collect(o, name + ".p2");
    d1.collect(o, name + ".d1");
    d2.collect(o, name + ".d2");
    out.collect(o, name + ".out");
  }
};

// Multi-scale conditions for the generator. Any entry may be absent;
// absent entries skip their injection point.
template <class S>
struct ResidualEmbeddings {
  std::optional<Tensor<S>> r1;  // [N,c3,H/4,W/4]
  std::optional<Tensor<S>> r2;  // [N,c2,H/2,W/2]
  std::optional<Tensor<S>> r3;  // [N,c1,H,W]
};

// --- generator -----------------------------------------------------------------

template <class S>
struct Generator {
  ModelConfig cfg;
  Conv<S> stem;
  ResBlock<S> enc1;
  Conv<S> down1;
  ResBlock<S> enc2;
  Conv<S> down2;
  ResBlock<S> bott;
  Conv<S> fuse_r1;  // zero-init embedding fusion (additive)
  Conv<S> up1;
  Conv<S> skip1;
  Conv<S> fuse_r2;
  ResBlock<S> dec1;
  Conv<S> up2;
  Conv<S> skip2;
  Conv<S> fuse_r3;
  ResBlock<S> dec2;
  Conv<S> out;

  static Generator make(const ModelConfig& cfg, uint64_t seed) {
    const int64_t c = cfg.gen_base;
    Generator g;
    g.cfg = cfg;
    g.stem = Conv<S>::make(3, c, 3, 1, 1, seed, "gen.stem");
    g.enc1 = ResBlock<S>::make(c, seed, "gen.enc1");
    g.down1 = Conv<S>::make(c, 2 * c, 3, 2, 1, seed, "gen.down1");
    g.enc2 = ResBlock<S>::make(2 * c, seed, "gen.enc2");
    g.down2 = Conv<S>::make(2 * c, 4 * c, 3, 2, 1, seed, "gen.down2");
    g.bott = ResBlock<S>::make(4 * c, seed, "gen.bott");
    g.fuse_r1 = Conv<S>::make(4 * c + cfg.regm_c3, 4 * c, 1, 1, 0, seed, "gen.fuse_r1", true);
    g.up1 = Conv<S>::make(4 * c, 2 * c, 3, 1, 1, seed, "gen.up1");
    g.skip1 = Conv<S>::make(4 * c, 2 * c, 1, 1, 0, seed, "gen.skip1");
    g.fuse_r2 = Conv<S>::make(2 * c + cfg.regm_c2, 2 * c, 1, 1, 0, seed, "gen.fuse_r2", true);
    g.dec1 = ResBlock<S>::make(2 * c, seed, "gen.dec1");
    g.up2 = Conv<S>::make(2 * c, c, 3, 1, 1, seed, "gen.up2");
    g.skip2 = Conv<S>::make(2 * c, c, 1, 1, 0, seed, "gen.skip2");
    g.fuse_r3 = Conv<S>::make(c + cfg.regm_c1, c, 1, 1, 0, seed, "gen.fuse_r3", true);
    g.dec2 = ResBlock<S>::make(c, seed, "gen.dec2");
    g.out = Conv<S>::make(c, 3, 3, 1, 1, seed, "gen.out");
    return g;
  }

  void collect(ParamList<S>& o) const {
    stem.collect(o, "gen.stem");
    enc1.collect(o, "gen.enc1");
    down1.collect(o, "gen.down1");
    enc2.collect(o, "gen.enc2");
    down2.collect(o, "gen.down2");
    bott.collect(o, "gen.bott");
    fuse_r1.collect(o, "gen.fuse_r1");
    up1.collect(o, "gen.up1");
    skip1.collect(o, "gen.skip1");
    fuse_r2.collect(o, "gen.fuse_r2");
    dec1.collect(o, "gen.dec1");
    up2.collect(o, "gen.up2");
    skip2.collect(o, "gen.skip2");
    fuse_r3.collect(o, "gen.fuse_r3");
    dec2.collect(o, "gen.dec2");
    out.collect(o, "gen.out");
  }
};

namespace detail {

template <class S>
void check_injection(const char* slot, const Tensor<S>& r, int64_t want_c,
                     int64_t want_h, int64_t want_w) {
  DARCOT_REQUIRE(r.rank() == 4 && r.dim(1) == want_c && r.dim(2) == want_h &&
                     r.dim(3) == want_w,
                 "generator_forward: embedding ", slot, " must be [N,", want_c, ",",
                 want_h, ",", want_w, "], got ", shape_str(r.shape()));
}

}  // namespace detail

// One generator pass. With absent embeddings this is the unconditional first
// pass; the conditioned pass shares the exact same code path.
template <class S>
Tensor<S> generator_forward(const Tensor<S>& y,
                            const ResidualEmbeddings<S>* emb,
                            const Generator<S>& g) {
  DARCOT_REQUIRE(y.rank() == 4 && y.dim(1) == 3, "generator_forward: expected [N,3,H,W], got ",
                 shape_str(y.shape()));
  const int64_t h = y.dim(2), w = y.dim(3);
  DARCOT_REQUIRE(h % 4 == 0 && w % 4 == 0 && h >= 8 && w >= 8,
                 "generator_forward: spatial size must be divisible by 4 and >= 8, got ",
                 h, "x", w);

  Tensor<S> h0 = g.stem(y);
  Tensor<S> e1 = g.enc1(h0);
  Tensor<S> e2 = g.enc2(g.down1(e1));
  Tensor<S> b = g.bott(g.down2(e2));
  if (emb && emb->r1) {
    detail::check_injection("R1", *emb->r1, g.cfg.regm_c3, h / 4, w / 4);
    b = ops::add(b, g.fuse_r1(ops::concat_channels(b, *emb->r1)));
  }
  Tensor<S> d1 = g.up1(ops::upsample2x(b));
  d1 = g.skip1(ops::concat_channels(d1, e2));
  if (emb && emb->r2) {
    detail::check_injection("R2", *emb->r2, g.cfg.regm_c2, h / 2, w / 2);
    d1 = ops::add(d1, g.fuse_r2(ops::concat_channels(d1, *emb->r2)));
  }
  d1 = g.dec1(d1);
  Tensor<S> d2 = g.up2(ops::upsample2x(d1));
  d2 = g.skip2(ops::concat_channels(d2, e1));
  if (emb && emb->r3) {
    detail::check_injection("R3", *emb->r3, g.cfg.regm_c1, h, w);
    d2 = ops::add(d2, g.fuse_r3(ops::concat_channels(d2, *emb->r3)));
  }
  d2 = g.dec2(d2);
  return ops::add(y, g.out(d2));
}

// --- REGM ------------------------------------------------------------------------

template <class S>
struct Regm {
  ModelConfig cfg;
  Conv<S> enc1, enc2, enc3;  // strided encoder down to H/4
  Conv<S> pw1;
  MdtaBlock<S> mdta1;
  GdfnBlock<S> gdfn1;
  Conv<S> pw2;
  MdtaBlock<S> mdta2;
  GdfnBlock<S> gdfn2;
  Conv<S> proj2;  // 3x3, c3 -> c2 before upsampling
  Conv<S> pw3;
  MdtaBlock<S> mdta3;
  GdfnBlock<S> gdfn3;
  Conv<S> proj3;  // 3x3, c2 -> c1 before upsampling

  static Regm make(const ModelConfig& cfg, uint64_t seed) {
    Regm r;
    r.cfg = cfg;
    const int64_t c3 = cfg.regm_c3, c2 = cfg.regm_c2, c1 = cfg.regm_c1;
    r.enc1 = Conv<S>::make(3, c3 / 4, 3, 1, 1, seed, "regm.enc1");
    r.enc2 = Conv<S>::make(c3 / 4, c3 / 2, 3, 2, 1, seed, "regm.enc2");
    r.enc3 = Conv<S>::make(c3 / 2, c3, 3, 2, 1, seed, "regm.enc3");
    r.pw1 = Conv<S>::make(c3, c3, 1, 1, 0, seed, "regm.pw1");
    r.mdta1 = MdtaBlock<S>::make(c3, seed, "regm.mdta1");
    r.gdfn1 = GdfnBlock<S>::make(c3, seed, "regm.gdfn1");
    r.pw2 = Conv<S>::make(c3, c3, 1, 1, 0, seed, "regm.pw2");
    r.mdta2 = MdtaBlock<S>::make(c3, seed, "regm.mdta2");
    r.gdfn2 = GdfnBlock<S>::make(c3, seed, "regm.gdfn2");
    r.proj2 = Conv<S>::make(c3, c2, 3, 1, 1, seed, "regm.proj2");
    r.pw3 = Conv<S>::make(c2, c2, 1, 1, 0, seed, "regm.pw3");
    r.mdta3 = MdtaBlock<S>::make(c2, seed, "regm.mdta3");
    r.gdfn3 = GdfnBlock<S>::make(c2, seed, "regm.gdfn3");
    r.proj3 = Conv<S>::make(c2, c1, 3, 1, 1, seed, "regm.proj3");
    return r;
  }

  void collect(ParamList<S>& o) const {
    enc1.collect(o, "regm.enc1");
    enc2.collect(o, "regm.enc2");
    enc3.collect(o, "regm.enc3");
    pw1.collect(o, "regm.pw1");
    mdta1.collect(o, "regm.mdta1");
    gdfn1.collect(o, "regm.gdfn1");
    pw2.collect(o, "regm.pw2");
    mdta2.collect(o, "regm.mdta2");
    gdfn2.collect(o, "regm.gdfn2");
    proj2.collect(o, "regm.proj2");
    pw3.collect(o, "regm.pw3");
    mdta3.collect(o, "regm.mdta3");
    gdfn3.collect(o, "regm.gdfn3");
    proj3.collect(o, "regm.proj3");
  }
};

template <class S>
struct RegmOut {
  Tensor<S> r0;  // encoder output at H/4
  ResidualEmbeddings<S> embeddings;
};

// R0 = Encoder(r0_hat);
// R1 = GDFN(MDTA(Conv1x1(R0)));
// R2 = up2x(Conv3x3(GDFN(MDTA(Conv1x1(R0)))));
// R3 = up2x(Conv3x3(GDFN(MDTA(Conv1x1(R2))))).
// The 2x upsampling aligns R2/R3 with the decoder scales they condition.
template <class S>
RegmOut<S> regm_forward(const Tensor<S>& r0_hat, const Regm<S>& r) {
  DARCOT_REQUIRE(r0_hat.rank() == 4 && r0_hat.dim(1) == 3,
                 "regm_forward: expected [N,3,H,W] residual, got ",
                 shape_str(r0_hat.shape()));
  DARCOT_REQUIRE(r0_hat.dim(2) % 4 == 0 && r0_hat.dim(3) % 4 == 0,
                 "regm_forward: spatial size must be divisible by 4, got ",
                 r0_hat.dim(2), "x", r0_hat.dim(3));
  RegmOut<S> out;
  Tensor<S> r0 = r.enc3(ops::gelu(r.enc2(ops::gelu(r.enc1(r0_hat)))));
  out.r0 = r0;
  Tensor<S> r1 = r.gdfn1(r.mdta1(r.pw1(r0)));
  Tensor<S> r2 = ops::upsample2x(r.proj2(r.gdfn2(r.mdta2(r.pw2(r0)))));
  Tensor<S> r3 = ops::upsample2x(r.proj3(r.gdfn3(r.mdta3(r.pw3(r2)))));
  out.embeddings.r1 = r1;
  out.embeddings.r2 = r2;
  out.embeddings.r3 = r3;
  return out;
}

// --- projection of x0_hat (ablation arm "conditioned on x0") ---------------------

template <class S>
struct ProjX0 {
  Conv<S> p1, p2, p3;  // 1x1 projections of pooled x0 onto the three scales

  static ProjX0 make(const ModelConfig& cfg, uint64_t seed) {
    ProjX0 p;
    p.p1 = Conv<S>::make(3, cfg.regm_c3, 1, 1, 0, seed, "projx0.p1");
    p.p2 = Conv<S>::make(3, cfg.regm_c2, 1, 1, 0, seed, "projx0.p2");
    p.p3 = Conv<S>::make(3, cfg.regm_c1, 1, 1, 0, seed, "projx0.p3");
    return p;
  }

  ResidualEmbeddings<S> operator()(const Tensor<S>& x0) const {
    ResidualEmbeddings<S> e;
    Tensor<S> half = ops::avg_pool2x(x0);
    Tensor<S> quarter = ops::avg_pool2x(half);
    e.r1 = p1(quarter);
    e.r2 = p2(half);
    e.r3 = p3(x0);
    return e;
  }

  void collect(ParamList<S>& o) const {
    p1.collect(o, "projx0.p1");
    p2.collect(o, "projx0.p2");
    p3.collect(o, "projx0.p3");
  }
};

// --- potential --------------------------------------------------------------------

// Strided-conv critic: 4 conv + leaky-relu stages, global average pool,
// linear head to one scalar per sample.
template <class S>
struct Potential {
  Conv<S> c1, c2, c3, c4;
  Tensor<S> head_w;  // [8*pb, 1]
  Tensor<S> head_b;  // scalar

  static Potential make(const ModelConfig& cfg, uint64_t seed) {
    const int64_t p = cfg.pot_base;
    Potential n;
    n.c1 = Conv<S>::make(3, p, 3, 2, 1, seed, "pot.c1");
    n.c2 = Conv<S>::make(p, 2 * p, 3, 2, 1, seed, "pot.c2");
    n.c3 = Conv<S>::make(2 * p, 4 * p, 3, 2, 1, seed, "pot.c3");
    n.c4 = Conv<S>::make(4 * p, 8 * p, 3, 2, 1, seed, "pot.c4");
    n.head_w = detail::init_uniform<S>({8 * p, 1}, 8 * p, seed, "pot.head_w");
    n.head_b = Tensor<S>::scalar(S(0));
    return n;
  }

  // [N,3,H,W] -> [N]
  Tensor<S> operator()(const Tensor<S>& x) const {
    DARCOT_REQUIRE(x.rank() == 4 && x.dim(1) == 3, "potential: expected [N,3,H,W], got ",
                   shape_str(x.shape()));
    Tensor<S> h = ops::leaky_relu(c1(x));
    h = ops::leaky_relu(c2(h));
    h = ops::leaky_relu(c3(h));
    h = ops::leaky_relu(c4(h));
    Tensor<S> pooled = ops::global_avg_pool(h);                  // [N,8p]
    Tensor<S> score = ops::matmul(pooled, head_w);               // [N,1]
    score = ops::add(score, head_b);                             // scalar broadcast
    return ops::reshape(score, {x.dim(0)});
  }

  void collect(ParamList<S>& o) const {
    c1.collect(o, "pot.c1");
    c2.collect(o, "pot.c2");
    c3.collect(o, "pot.c3");
    c4.collect(o, "pot.c4");
    o.add("pot.head_w", head_w);
    o.add("pot.head_b", head_b);
  }
};

// --- the two-pass transport map -----------------------------------------------------

template <class S>
struct TransportMap {
  ModelConfig cfg;
  Generator<S> gen;                 // theta_1, shared by both passes
  std::optional<Regm<S>> regm;      // theta_2 (modes full / r0)
  std::optional<ProjX0<S>> projx0;  // theta_2 variant (mode x0)

  static TransportMap make(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    TransportMap m;
    m.cfg = cfg;
    m.gen = Generator<S>::make(cfg, seed);
    if (cfg.conditioning == Conditioning::full || cfg.conditioning == Conditioning::r0)
      m.regm = Regm<S>::make(cfg, seed);
    if (cfg.conditioning == Conditioning::x0) m.projx0 = ProjX0<S>::make(cfg, seed);
    return m;
  }

  ParamList<S> params() const {
    ParamList<S> o;
    gen.collect(o);
    if (regm) regm->collect(o);
    if (projx0) projx0->collect(o);
    return o;
  }
};

template <class S>
struct TwoPassOut {
  Tensor<S> x_hat;   // T(y)
  Tensor<S> x0_hat;  // unconditional first pass
  Tensor<S> r0_hat;  // y - x0_hat
  ResidualEmbeddings<S> embeddings;
};

// x0 = G(y); r0 = y - x0; embeddings = REGM(r0); x = G(y | R1,R2,R3).
// Both passes share theta_1. Conditioning variants:
//   none -> single pass, x = x0;
//   x0   -> embeddings projected from the intermediate result;
//   r0   -> raw encoder output injected at the dense scale only;
//   full -> the complete multi-scale residual embeddings.
template <class S>
TwoPassOut<S> two_pass_restore(const Tensor<S>& y, const TransportMap<S>& map) {
  TwoPassOut<S> out;
  out.x0_hat = generator_forward<S>(y, nullptr, map.gen);
  out.r0_hat = ops::sub(y, out.x0_hat);
  switch (map.cfg.conditioning) {
    case Conditioning::none:
      out.x_hat = out.x0_hat;
      return out;
    case Conditioning::x0:
      out.embeddings = (*map.projx0)(out.x0_hat);
      break;
    case Conditioning::r0: {
      RegmOut<S> r = regm_forward(out.r0_hat, *map.regm);
      out.embeddings.r1 = r.r0;  // dense-scale injection of the raw encoding
      break;
    }
    case Conditioning::full: {
      RegmOut<S> r = regm_forward(out.r0_hat, *map.regm);
      out.embeddings = r.embeddings;
      break;
    }
  }
  out.x_hat = generator_forward(y, &out.embeddings, map.gen);
  return out;
}

// Single-image conveniences ([3,H,W] in, [3,H,W] out).
template <class S>
Tensor<S> restore_single(const Tensor<S>& y, const TransportMap<S>& map) {
  DARCOT_REQUIRE(y.rank() == 3, "restore_single: expected [3,H,W], got ",
                 shape_str(y.shape()));
  Tensor<S> batch = ops::reshape(y, {1, y.dim(0), y.dim(1), y.dim(2)});
  TwoPassOut<S> out = two_pass_restore(batch, map);
  return ops::reshape(out.x_hat, y.shape());
}

// Pooled dense-scale embedding used by the contrastive loss and the probe:
// global average pool of R1, L2-normalized downstream.
template <class S>
Tensor<S> pooled_r1(const ResidualEmbeddings<S>& emb) {
  DARCOT_REQUIRE(emb.r1.has_value(), "pooled_r1: embeddings have no R1");
  return ops::global_avg_pool(*emb.r1);
}

}  // namespace darcot::nets
