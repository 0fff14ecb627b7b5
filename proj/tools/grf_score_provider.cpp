// Score provider speaking the external protocol on stdin/stdout, backed by the
// built-in Gaussian random field prior.

#include <unistd.h>

#include <CLI11.hpp>

#include "lensforge/score_protocol.hpp"

int main(int argc, char **argv) {
  CLI::App app{"GRF score provider for the lensforge external prior protocol"};
  double slope = -2.0, amplitude = 4.0, mean = 0.0;
  app.add_option("--slope", slope, "spectral slope (negative)");
  app.add_option("--amplitude", amplitude, "spectral amplitude");
  app.add_option("--mean", mean, "prior mean in normalized units");
  CLI11_PARSE(app, argc, argv);

  try {
    const lensforge::GrfPrior prior(slope, amplitude, mean);
    return lensforge::protocol::serve(
        STDIN_FILENO, STDOUT_FILENO,
        [&](const lensforge::protocol::ScoreRequest &q, const std::vector<double> &x,
            const std::vector<double> &) {
          if (q.rows != q.cols) throw lensforge::ProtocolError("only square grids are supported");
          // The grid's angular size does not enter the GRF score.
          const lensforge::ScalarField f(lensforge::make_grid(q.rows, static_cast<double>(q.rows)),
                                         lensforge::Quantity::generic, x);
          return prior.score(f, q.sigma).data();
        },
        [&](double sigma, std::size_t rows, std::size_t cols) {
          if (rows != cols) throw lensforge::ProtocolError("only square grids are supported");
          return prior.curvature_bound(sigma, lensforge::make_grid(rows, static_cast<double>(rows)));
        });
  } catch (const std::exception &e) {
    std::fprintf(stderr, "grf_score_provider: %s\n", e.what());
    return 2;
  }
}
