// Writes the planted-bias synthetic bundle (and a matching external ranking
// file) for trying the pipeline end to end.

#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "bagel/detail/io.hpp"
#include "bagel/fixture.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate the planted-bias fixture bundle"};
  std::string out;
  std::uint64_t seed = 7;
  std::size_t images = 400;
  app.add_option("out", out, "Output directory")->required();
  app.add_option("--seed", seed, "Generator seed")->capture_default_str();
  app.add_option("--images", images, "Number of images")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  bagel::fixture::FixtureSpec spec;
  spec.seed = seed;
  spec.images = images;
  const auto fx = bagel::fixture::make_planted_fixture(spec);
  bagel::fixture::write_fixture_bundle(fx, out);
  bagel::detail::write_file_atomic(std::filesystem::path(out) / "external_ranking.json",
                                   bagel::fixture::planted_external_ranking(fx).dump(2) + "\n");
  std::cout << "wrote " << out << " (" << images << " images, " << fx.dataset.manifest.num_concepts()
            << " concepts, " << fx.dataset.manifest.num_layers() << " layers)\n";
  return 0;
}
