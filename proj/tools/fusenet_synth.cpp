// Writes a synthetic two-class PGM dataset plus manifest, for smoke tests
// and demos where no real imagery is available.
#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <string>

#include "fusenet/cli.hpp"
#include "fusenet/synthetic.hpp"

int main(int argc, char** argv) {
    CLI::App app{"synthetic two-class dataset generator"};
    std::string out = "synthetic";
    std::size_t count = 600;
    std::size_t size = 64;
    std::uint64_t seed = 0;
    app.add_option("--out", out, "output directory");
    app.add_option("--count", count, "number of images");
    app.add_option("--size", size, "square image side in pixels");
    app.add_option("--seed", seed, "generator seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    return fusenet::run_command([&]() -> int {
        const std::string manifest = fusenet::write_synthetic_dataset(out, count, size, size, seed);
        std::cout << "wrote " << count << " images, manifest " << manifest << "\n";
        return 0;
    });
}
