#include <catch_amalgamated.hpp>

#include "support/grad_audit.hpp"

TEST_CASE("training losses match finite differences on a small model", "[gradcheck]") {
  for (const auto& audit : {grad_audit::audit_sr, grad_audit::audit_d, grad_audit::audit_cl}) {
    const auto r = audit();
    INFO(r.loss << " max_rel=" << r.max_rel << " checked=" << r.checked);
    CHECK(r.checked > 500);
    CHECK(r.max_rel < 1e-5);
  }
}
