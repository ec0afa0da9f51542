#!/usr/bin/env python3
"""Smoke test for the qlnet_py extension module.

Builds nothing itself: expects `cargo build --release -p qlnet-py` to have
produced target/release/libqlnet_py.so, which is linked next to this script
under the importable name qlnet_py.so.
"""

import math
import os
import shutil
import sys

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)


def link_extension():
    if any(
        os.path.exists(os.path.join(HERE, name))
        for name in ("qlnet_py.so", "qlnet_py.pyd")
    ):
        return
    for profile in ("release", "debug"):
        built = os.path.join(ROOT, "target", profile, "libqlnet_py.so")
        if os.path.exists(built):
            dest = os.path.join(HERE, "qlnet_py.so")
            try:
                os.symlink(built, dest)
            except OSError:
                shutil.copyfile(built, dest)
            return
    sys.exit(
        "libqlnet_py.so not found; run `cargo build --release -p qlnet-py` first"
    )


link_extension()
sys.path.insert(0, HERE)

import qlnet_py as ql  # noqa: E402


def check(name, cond, detail=""):
    status = "ok" if cond else "FAIL"
    print(f"  {name}: {status} {detail}")
    if not cond:
        sys.exit(1)


print("== dataset generation and oracle certification")
data = ql.gen_planted_diagonal(6, 300, 1)
check("dataset shape", len(data) == 300 and data.dim == 6)
sol = ql.solve_oracle(data, 2, False)
check("planted data is realizable", sol.loss_star <= 1e-10, f"loss*={sol.loss_star:.3e}")

layer = ql.closed_form_solver(data, False)
net = ql.Network.single(layer)
loss = ql.loss_mse(net, data)
check("closed form reaches oracle", abs(loss - sol.loss_star) <= 1e-9 * (1 + sol.loss_star))
check("closed form Q orthonormal", ql.penalty_orth(layer.q) <= 1e-9)

print("== training to the certified optimum (added-norm variant)")
init = ql.initialize_single(4, 4, seed=7)
small = ql.gen_planted_diagonal(4, 200, 3)
small_sol = ql.solve_oracle(small, 2, False)
result = ql.train(init, small, epochs=8000, seed=7, use_alpha=True)
check("training converged near oracle", not result.diverged and
      abs(result.final_loss - small_sol.loss_star) <= 5e-3,
      f"loss={result.final_loss:.3e}")
check("oracle lower-bounds training", result.final_loss >= small_sol.loss_star - 1e-9)
check("nmse consistent", abs(ql.nmse(result.model, small) -
      result.final_loss * len(small) / sum(v[0] ** 2 for v in small.y)) <= 1e-9)

print("== spurious minimum and its classification")
trap_data, trap = ql.make_example1(3, 40, 0)
trap_sol = ql.solve_oracle(trap_data, 2, False)
check("trap gradient vanishes", ql.grad_norm(ql.Network.single(trap), trap_data) == 0.0)
tag = ql.classify_point(trap, trap_data, trap_sol)
check("trap classified", tag == "SemidefiniteResidualNonGlobal", tag)

print("== escape with the trainable norm regressor")
# The perturbation must be generic (a constant shift keeps all neurons
# identical forever); draw it from a seeded gaussian.
import random  # noqa: E402

rng = random.Random(12345)
perturbed = ql.QLLayer(
    [[qij + 1e-6 * rng.gauss(0.0, 1.0) for qij in row] for row in trap.q],
    trap.lam,
    trap.alpha,
)
escape = ql.train(ql.Network.single(perturbed), trap_data, epochs=20000,
                  seed=1, use_alpha=True)
check("escaped to the global optimum",
      escape.final_loss <= trap_sol.loss_star + 1e-4,
      f"loss={escape.final_loss:.3e} vs trap loss {ql.loss_mse(ql.Network.single(trap), trap_data):.3e}")

print("== step-size rescaling equivalence")
dev = ql.scaled_trajectory_check(ql.closed_form_solver(small, False), small,
                                 beta=2.0, eta_q=1e-3, eta_lambda=1e-3, steps=50)
check("rescaled trajectories agree", dev <= 1e-8, f"deviation={dev:.3e}")

print("== deep and polynomial variants")
deep_data = ql.gen_deep_planted(3, 9, 150, 5)
deep = ql.Network.deep_random([3, 9, 1], seed=2)
deep_result = ql.train(deep, deep_data, epochs=4000, seed=2,
                       gamma=1.0 + 1e-6)
check("deep training runs", not deep_result.diverged,
      f"loss={deep_result.final_loss:.3e}")

poly = ql.Network.poly_basis(2, 3)
poly_data = ql.gen_independent(2, 60, 9)
poly_sol = ql.solve_oracle(poly_data, 3, False)
gamma = sum(v[0] ** 2 for v in poly_data.y) / len(poly_data) + 1e-6
poly_result = ql.train(poly, poly_data, epochs=20000, seed=3, gamma=gamma)
check("poly reaches degree-3 oracle",
      abs(poly_result.final_loss - poly_sol.loss_star) <= 1e-3 * (1 + poly_sol.loss_star),
      f"loss={poly_result.final_loss:.6f} vs {poly_sol.loss_star:.6f}")

print("== checkpoint round trip")
text = result.model.to_checkpoint_json(seed=7)
back = ql.Network.from_checkpoint_json(text)
x = [1.0, 0.2, -0.3, 0.8]
check("checkpoint preserves predictions",
      math.isclose(back.predict(x)[0], result.model.predict(x)[0], rel_tol=0, abs_tol=0))

print("smoke test passed")
