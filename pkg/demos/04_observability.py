"""Empirical observability constant from a random ensemble of initial data."""

from sail.errors import ValidationError
from sail.geometry import build_reference_domain
from sail.verify import observability_estimate, random_ensemble

g = build_reference_domain(17, 17)
rep = observability_estimate(g, None, 4.6, random_ensemble(20, seed=0, beam_length=3.0),
                             dt=1 / 64, refine=True)
print(f"C_hat = {rep.C_hat:.4f}; on the refined grid {rep.refined_C_hat:.4f} "
      f"(change {rep.refinement_change:.1%})")

try:
    observability_estimate(g, None, 4.4, random_ensemble(2))
except ValidationError as exc:
    print(f"T below the time threshold is rejected: {exc}")
