// Embedding-net internals: gradient correctness against finite differences,
// pooling arithmetic, determinism, trainer behavior, and blob round trips.

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "reidlab/nets.hpp"

using namespace reidlab;

namespace {

Image random_image(int h, int w, int c, uint64_t seed) {
  Image img(h, w, c);
  Rng rng(seed);
  for (auto& x : img.v) x = static_cast<float>(rng.uniform());
  return img;
}

// Synthesize a tiny labeled corpus: each identity is a flat base color plus
// per-image noise, so nearby labels are genuinely separable.
std::vector<PersonImage> tiny_corpus(int n_ids, int imgs_per_id, int h, int w,
                                     uint64_t seed) {
  Rng rng(seed);
  std::vector<PersonImage> out;
  for (int id = 0; id < n_ids; ++id) {
    float base[3] = {static_cast<float>(rng.uniform()),
                     static_cast<float>(rng.uniform()),
                     static_cast<float>(rng.uniform())};
    for (int k = 0; k < imgs_per_id; ++k) {
      PersonImage im;
      im.gt_id = id;
      im.cam_id = k % 2;
      im.key = "id" + std::to_string(id) + "_" + std::to_string(k);
      im.pixels = Image(h, w, 3);
      for (int p = 0; p < h * w; ++p)
        for (int ch = 0; ch < 3; ++ch)
          im.pixels.v[p * 3 + ch] = std::clamp(
              base[ch] + static_cast<float>(rng.normal(0.0, 0.05)), 0.f, 1.f);
      out.push_back(std::move(im));
    }
  }
  return out;
}

std::vector<const PersonImage*> ptrs(const std::vector<PersonImage>& v) {
  std::vector<const PersonImage*> p;
  for (const auto& im : v) p.push_back(&im);
  return p;
}

// Loss used by the finite-difference check: fixed linear readout of the
// unit-norm embedding. Smooth wherever no ReLU input sits at zero.
double probe_loss(const EmbeddingNet& net, const Image& img,
                  const std::vector<float>& probe) {
  ForwardCache fc;
  forward(net, img, fc);
  double acc = 0.0;
  for (size_t i = 0; i < fc.embed.size(); ++i)
    acc += static_cast<double>(probe[i]) * fc.embed[i];
  return acc;
}

}  // namespace

TEST(Nets, ConvOutArithmetic) {
  EXPECT_EQ(netops::conv_out(128, 2), 64);
  EXPECT_EQ(netops::conv_out(5, 2), 3);
  EXPECT_EQ(netops::conv_out(7, 1), 7);
  EXPECT_EQ(netops::conv_out(1, 2), 1);
}

TEST(Nets, InitValidatesShape) {
  NetConfig bad;
  bad.widths = {8, 16};
  bad.strides = {2};
  EXPECT_THROW(
      {
        try {
          init_net(bad, 1);
        } catch (const std::invalid_argument& e) {
          EXPECT_STREQ(e.what(), "net config: widths/strides mismatch");
          throw;
        }
      },
      std::invalid_argument);
}

TEST(Nets, InitDeterministicAndSeedSensitive) {
  NetConfig cfg;
  auto a = init_net(cfg, 5);
  auto b = init_net(cfg, 5);
  auto c = init_net(cfg, 6);
  ASSERT_EQ(a.stages.size(), b.stages.size());
  for (size_t i = 0; i < a.stages.size(); ++i)
    EXPECT_EQ(a.stages[i].w, b.stages[i].w);
  EXPECT_NE(a.stages[0].w, c.stages[0].w);
}

TEST(Nets, GemForwardMatchesMeanAtAlphaOne) {
  Image fmap = random_image(4, 5, 3, 11);
  auto pooled = netops::gem_forward(fmap, 1.0);
  for (int ch = 0; ch < 3; ++ch) {
    double mean = 0.0;
    for (int p = 0; p < 20; ++p) mean += fmap.v[p * 3 + ch];
    mean /= 20.0;
    EXPECT_NEAR(pooled[ch], mean, 1e-12);
  }
}

TEST(Nets, GemForwardMonotoneInAlpha) {
  Image fmap = random_image(4, 4, 2, 12);
  float mx = 0.f;
  for (int p = 0; p < 16; ++p) mx = std::max(mx, fmap.v[p * 2]);
  double prev = 0.0;
  for (double alpha : {1.0, 2.0, 4.0, 8.0}) {
    double g = netops::gem_forward(fmap, alpha)[0];
    EXPECT_GE(g, prev - 1e-12);
    EXPECT_LE(g, static_cast<double>(mx) + 1e-9);
    prev = g;
  }
}

// Central-difference check over every parameter of a small net. The probe
// loss is linear in the embedding, so analytic gradients come from one
// backward call with d_embed = probe.
TEST(Nets, GradientsMatchFiniteDifferences) {
  NetConfig cfg;
  cfg.widths = {2, 3};
  cfg.strides = {1, 2};
  cfg.gem_alpha = 3.0;
  cfg.embed_dim = 4;
  EmbeddingNet net = init_net(cfg, 21);
  Image img = random_image(6, 5, 3, 22);

  std::vector<float> probe(4);
  Rng rng(23);
  for (auto& x : probe) x = static_cast<float>(rng.normal(0.0, 1.0));

  ForwardCache fc;
  forward(net, img, fc);
  NetGrads grads;
  backward(net, fc, probe, grads);

  auto check = [&](float* param, float analytic, const char* tag, int idx) {
    const double eps = 2e-3;
    float saved = *param;
    *param = saved + static_cast<float>(eps);
    double lp = probe_loss(net, img, probe);
    *param = saved - static_cast<float>(eps);
    double lm = probe_loss(net, img, probe);
    *param = saved;
    double numeric = (lp - lm) / (2 * eps);
    double tol = 2e-2 * std::max(1.0, std::abs(numeric));
    EXPECT_NEAR(analytic, numeric, tol) << tag << "[" << idx << "]";
  };

  for (size_t s = 0; s < net.stages.size(); ++s) {
    auto& st = net.stages[s];
    for (size_t j = 0; j < st.w.size(); ++j)
      check(&st.w[j], grads.stages[s].w[j], "stage_w", static_cast<int>(j));
    for (size_t j = 0; j < st.b.size(); ++j)
      check(&st.b[j], grads.stages[s].b[j], "stage_b", static_cast<int>(j));
  }
  for (size_t j = 0; j < net.head_w.size(); ++j)
    check(&net.head_w[j], grads.head_w[j], "head_w", static_cast<int>(j));
  for (size_t j = 0; j < net.head_b.size(); ++j)
    check(&net.head_b[j], grads.head_b[j], "head_b", static_cast<int>(j));
}

TEST(Nets, EmbeddingIsUnitNorm) {
  NetConfig cfg;
  cfg.embed_dim = 16;
  EmbeddingNet net = init_net(cfg, 31);
  for (uint64_t s = 0; s < 4; ++s) {
    auto e = embed_image(net, random_image(32, 16, 3, 100 + s));
    double n = 0;
    for (float x : e) n += static_cast<double>(x) * x;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
  }
}

TEST(Nets, DegenerateInputFallsBackToFirstAxis) {
  NetConfig cfg;
  cfg.widths = {4};
  cfg.strides = {2};
  cfg.embed_dim = 3;
  EmbeddingNet net = init_net(cfg, 32);
  for (auto& st : net.stages) {
    std::fill(st.w.begin(), st.w.end(), 0.f);
    std::fill(st.b.begin(), st.b.end(), 0.f);
  }
  std::fill(net.head_w.begin(), net.head_w.end(), 0.f);
  std::fill(net.head_b.begin(), net.head_b.end(), 0.f);
  auto e = embed_image(net, random_image(8, 8, 3, 33));
  ASSERT_EQ(e.size(), 3u);
  EXPECT_EQ(e[0], 1.f);
  EXPECT_EQ(e[1], 0.f);
  EXPECT_EQ(e[2], 0.f);
}

TEST(Nets, EmbedDeterministic) {
  NetConfig cfg;
  EmbeddingNet net = init_net(cfg, 41);
  Image img = random_image(32, 16, 3, 42);
  EXPECT_EQ(embed_image(net, img), embed_image(net, img));
}

TEST(Nets, TrainerRejectsThinData) {
  auto corpus = tiny_corpus(1, 4, 8, 8, 51);
  NetConfig cfg;
  cfg.widths = {4};
  cfg.strides = {2};
  EmbeddingNet net = init_net(cfg, 52);
  TrainConfig tc;
  EXPECT_THROW(
      {
        try {
          train_triplet(net, ptrs(corpus), tc);
        } catch (const std::invalid_argument& e) {
          EXPECT_STREQ(e.what(),
                       "training needs >=2 identities with >=2 images each");
          throw;
        }
      },
      std::invalid_argument);
}

TEST(Nets, ZeroStepsLeaveWeightsUntouched) {
  auto corpus = tiny_corpus(3, 3, 8, 8, 61);
  NetConfig cfg;
  cfg.widths = {4};
  cfg.strides = {2};
  EmbeddingNet net = init_net(cfg, 62);
  auto before = net.stages[0].w;
  TrainConfig tc;
  tc.steps = 0;
  auto log = train_triplet(net, ptrs(corpus), tc);
  EXPECT_TRUE(log.loss.empty());
  EXPECT_EQ(net.stages[0].w, before);
}

TEST(Nets, TrainingReducesLossAndIsDeterministic) {
  auto corpus = tiny_corpus(4, 4, 16, 8, 71);
  NetConfig cfg;
  cfg.widths = {4, 8};
  cfg.strides = {2, 2};
  cfg.embed_dim = 8;
  TrainConfig tc;
  tc.steps = 40;
  tc.ids_per_batch = 4;
  tc.imgs_per_id = 3;
  tc.lr = 0.05;
  tc.seed = 72;

  EmbeddingNet a = init_net(cfg, 73);
  EmbeddingNet b = init_net(cfg, 73);
  auto log_a = train_triplet(a, ptrs(corpus), tc);
  auto log_b = train_triplet(b, ptrs(corpus), tc);

  ASSERT_FALSE(log_a.loss.empty());
  for (double l : log_a.loss) EXPECT_TRUE(std::isfinite(l));
  EXPECT_EQ(log_a.loss, log_b.loss);
  for (size_t i = 0; i < a.stages.size(); ++i)
    EXPECT_EQ(a.stages[i].w, b.stages[i].w);
  EXPECT_EQ(a.head_w, b.head_w);

  // early-window mean should dominate the late-window mean
  size_t n = log_a.loss.size();
  ASSERT_GE(n, 10u);
  double head = 0, tail = 0;
  for (size_t i = 0; i < 5; ++i) head += log_a.loss[i];
  for (size_t i = n - 5; i < n; ++i) tail += log_a.loss[i];
  EXPECT_LT(tail, head);
}

TEST(Nets, BlobRoundTrip) {
  NetConfig cfg;
  cfg.widths = {4, 8};
  cfg.strides = {2, 2};
  cfg.gem_alpha = 5.0;
  cfg.embed_dim = 6;
  EmbeddingNet net = init_net(cfg, 81);

  std::stringstream ss;
  write_net(ss, net);
  EmbeddingNet back = read_net(ss);

  EXPECT_EQ(back.seed, net.seed);
  EXPECT_EQ(back.cfg.widths, net.cfg.widths);
  EXPECT_EQ(back.cfg.strides, net.cfg.strides);
  EXPECT_EQ(back.cfg.gem_alpha, net.cfg.gem_alpha);
  EXPECT_EQ(back.cfg.embed_dim, net.cfg.embed_dim);
  for (size_t i = 0; i < net.stages.size(); ++i) {
    EXPECT_EQ(back.stages[i].w, net.stages[i].w);
    EXPECT_EQ(back.stages[i].b, net.stages[i].b);
  }
  EXPECT_EQ(back.head_w, net.head_w);
  EXPECT_EQ(back.head_b, net.head_b);

  Image img = random_image(16, 8, 3, 82);
  EXPECT_EQ(embed_image(net, img), embed_image(back, img));
}

TEST(Nets, BlobErrors) {
  NetConfig cfg;
  cfg.widths = {4};
  cfg.strides = {2};
  EmbeddingNet net = init_net(cfg, 91);
  std::stringstream ss;
  write_net(ss, net);
  std::string blob = ss.str();

  {
    std::stringstream bad(blob.substr(0, blob.size() / 2));
    EXPECT_THROW(read_net(bad), std::runtime_error);
  }
  {
    std::string corrupt = blob;
    corrupt[0] = 'X';
    std::stringstream bad(corrupt);
    try {
      read_net(bad);
      FAIL() << "expected magic check to throw";
    } catch (const std::runtime_error& e) {
      EXPECT_STREQ(e.what(), "not a model blob");
    }
  }
  {
    std::string corrupt = blob;
    corrupt[4] = 9;  // version field
    std::stringstream bad(corrupt);
    try {
      read_net(bad);
      FAIL() << "expected version check to throw";
    } catch (const std::runtime_error& e) {
      EXPECT_STREQ(e.what(), "unsupported model version");
    }
  }
}
