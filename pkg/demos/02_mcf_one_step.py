"""One step of mean curvature flow: learned operator vs references.

Trains a small operator on sphere evolutions (a couple of minutes at this
reduced resolution), then compares one step on a circle against the
analytic radius sqrt(r^2 - 2 tau), alongside the semi-implicit and fully
implicit reference schemes.
"""

from willmore import (
    AllenCahnStepConfig,
    GridSpec,
    TrainingConfig,
    apply_operator,
    circle_radius_mcf,
    discrete_l2_dist,
    mcf_implicit_step,
    mcf_semi_implicit_step,
    sphere_phase_field,
    train_operator,
)

grid = GridSpec(d=2, n=64, origin=(0.0, 0.0), edge_length=1.0)
eps = 2.0**-5
tau = 2.0**-12

cfg = TrainingConfig(
    m=50, r_min=0.08, r_max=0.4, batch_size=10,
    iterations=4000, seed=0, holdout_every=400, holdout_count=8,
)
print("training a 9-wide operator at n=64 ...")
op = train_operator(cfg, grid, eps, tau, kernel_width=9)

ac = AllenCahnStepConfig(eps=eps, tau_tilde=tau)
r0 = 0.25
u = sphere_phase_field(grid, r0, (0.5, 0.5), eps)
exact = sphere_phase_field(grid, circle_radius_mcf(r0, tau, 2), (0.5, 0.5), eps)

results = {
    "learned operator": apply_operator(op, u),
    "semi-implicit": mcf_semi_implicit_step(u, ac),
    "fully implicit": mcf_implicit_step(u, ac),
    "identity (no motion)": u,
}
print(f"\none MCF step of a circle, r0={r0}, tau=2^-12:")
for name, field in results.items():
    print(f"  {name:22s} error {discrete_l2_dist(field, exact):.3e}")
