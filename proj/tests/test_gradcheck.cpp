#include <catch2/catch_amalgamated.hpp>

#include "tdcedn/gradcheck.hpp"

using namespace tdcedn;
using Catch::Approx;

TEST_CASE("relative error helper and gradient floor") {
  CHECK(rel_err(1.0, 1.0, 1e-6) == 0.0);
  CHECK(rel_err(2.0, 1.0, 1e-6) == Approx(0.5));
  CHECK(rel_err(0.0, 1e-9, 1e-6) == Approx(1e-3));  // the floor makes this absolute
  CHECK(grad_floor(0.5) == Approx(1e-6));
  CHECK(grad_floor(-4.0) == Approx(4e-6));
  CHECK(grad_floor(0.0) == Approx(1e-6));
}

TEST_CASE("every layer passes its finite-difference check") {
  const auto results = layer_gradient_checks(2024);
  REQUIRE(results.size() == 11);
  for (const auto& r : results) {
    INFO(r.name << ": max rel err " << r.max_rel_err << " vs tol " << r.tol << " over "
                << r.probes << " probes");
    CHECK(r.probes > 0);
    CHECK(r.pass);
  }
}

TEST_CASE("the layer suite holds up under a second seed") {
  for (const auto& r : layer_gradient_checks(7)) {
    INFO(r.name << ": max rel err " << r.max_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("network spot checks pass at a reduced probe count") {
  NetCheckConfig cfg;
  cfg.probes_per_layer = 2;  // the full count runs in the acceptance binary
  const auto results = network_gradient_check(99, cfg);
  CHECK(results.size() > 50);  // one entry per layer of the net
  i64 probes = 0;
  for (const auto& r : results) {
    INFO(r.name << ": max rel err " << r.max_rel_err);
    CHECK(r.pass);
    probes += r.probes;
  }
  CHECK(probes == static_cast<i64>(results.size()) * cfg.probes_per_layer);
}
