#include "hypercd/cdnet.hpp"
#include "hypercd/error.hpp"

namespace hypercd {

FlopsReport flops(const ArchConfig& arch, const DomainSpec& domain, std::size_t height,
                  std::size_t width) {
  arch.validate();
  require(domain.bands > 0, ErrorKind::kUsage, "flops: domain needs a band count");
  FlopsReport report;
  report.pixels = height * width;
  const auto pixels = static_cast<std::uint64_t>(report.pixels);
  auto layer = [&](std::string name, std::size_t in, std::size_t out, std::size_t kernel) {
    LayerFlops l{std::move(name), in, out, kernel, 0};
    l.flops = 2ULL * in * out * kernel * kernel * pixels;
    report.total += l.flops;
    report.layers.push_back(std::move(l));
  };

  const std::size_t ch = arch.channels;
  if (arch.multiscale_encoder) {
    for (std::size_t k : {1, 3, 5}) {
      layer("C1 " + std::to_string(k) + "x" + std::to_string(k), domain.bands, ch, k);
    }
  } else {
    layer("C1", domain.bands, ch, arch.encoder_kernel);
  }
  if (arch.has_c2()) layer("C2", arch.encoder_out_channels(), ch, 1);
  for (std::size_t i = 0; i < arch.n_res_modules; ++i) {
    layer("R" + std::to_string(i + 1) + "a", ch, ch, 1);
    layer("R" + std::to_string(i + 1) + "b", ch, ch, 1);
  }
  if (!arch.residual_only) {
    layer("C3", ch, ch, 1);
    layer("C4", ch, ch, 1);
  }
  if (domain.classes > 0) layer("C5", ch, domain.classes, 1);
  return report;
}

}  // namespace hypercd
