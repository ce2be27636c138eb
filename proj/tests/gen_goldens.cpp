// Writes seeded module outputs (SS2D, one Mix-SSM block, EPEM) to a tensor
// directory. ctest bit-compares a fresh run against tests/golden/modules.

#include <cstdlib>
#include <iostream>

#include "textmamba/encoder.hpp"
#include "textmamba/epem.hpp"
#include "textmamba/io.hpp"
#include "textmamba/ss2d.hpp"

namespace tx = textmamba;

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: " << argv[0] << " OUT_DIR\n";
    return 2;
  }
  tx::io::TensorStore store;
  tx::Rng rng(0);

  {
    const auto map = rng.normal_array<double>({4, 4, 8}, 1.0);
    auto p = tx::Ss2dParams<double>::init(8, 16, rng, false);
    store.add("ss2d.input", map);
    store.add("ss2d.output", tx::ss2d_forward(map, p));
  }
  {
    tx::MixSsmConfig cfg;
    cfg.heads = 4;
    cfg.points = 4;
    cfg.state_dim = 16;
    const std::size_t c = 16;
    tx::EmbeddingSequence<double> seq(rng.normal_array<double>({20, c}, 1.0), {{4, 4}, {2, 2}});
    auto p = tx::MixSsmBlockParams<double>::init(c, 2, cfg, rng);
    p.ss2d->out_w = rng.uniform_array<double>({c, c}, -0.25, 0.25);
    store.add("block.input", seq.tokens);
    store.add("block.output", tx::mix_ssm_block(seq, p, cfg).tokens);
  }
  {
    const std::size_t c = 8;
    tx::PyramidFeatures<double> bb;
    for (std::size_t s : {8, 4, 2, 1}) bb.maps.push_back(rng.normal_array<double>({s, s, c}, 1.0));
    tx::PyramidFeatures<double> enc;
    for (std::size_t s : {8, 4, 2, 1}) enc.maps.push_back(rng.normal_array<double>({s, s, c}, 1.0));
    const auto p = tx::FpemParams<double>::init(c, rng);
    const auto r = tx::epem_forward(tx::flatten_pyramid(enc), bb, p);
    store.add("epem.sequence", r.seq.tokens);
    store.add("epem.f3_prime", r.f3_prime);
  }
  try {
    tx::io::write_store(argv[1], store);
  } catch (const tx::io::WriteError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
