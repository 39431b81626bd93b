"""Hypercube lower-bound family: value gaps, KL and the uncertainty bound."""
import numpy as np

from pacle.benchmarks import (kl_between_datasets, kl_closed_form, make_lower_bound_instance,
                              random_stage_policies, uncertainty_upper_check, value_gap)

d, H, n = 2, 2, 132
u = np.ones((H, d))
inst, data = make_lower_bound_instance(d, H, n, u, rng_seed=0)
flipped = u.copy()
flipped[0, 0] = -1
other, _ = make_lower_bound_instance(d, H, n, flipped, rng_seed=0)
print(f"gap scale {inst.gap_scale:.4f}, n_sub {inst.n_sub}")
print(f"KL from samples {kl_between_datasets(inst, other, data):.5f}, closed form {kl_closed_form(inst):.5f}")
gaps = [value_gap(inst, t) for t in random_stage_policies(inst, 5, 0)]
print("value gaps of random policies:", np.round(gaps, 4).tolist())
for n in (512, 1024, 2048):
    inst, data = make_lower_bound_instance(d, H, n, u, rng_seed=0)
    worst, bound = uncertainty_upper_check(inst, data, 500, 0)
    print(f"n = {n}: max U {worst:.3f} <= {bound:.3f}")
