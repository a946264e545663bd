"""Calibrating the simulator's two free scalars against measured throughput.

The model has exactly two knobs: the achieved fraction of peak compute and a
scale on link latencies.  Here they are fitted to two throughput points
measured on the real machine for the 5B model at 32 nodes (hybrid2 vs full
shard), then the calibrated simulator is asked about configurations it was
not fitted to.

Run with `python demos/05_calibration.py`.
"""

import warnings

from shardsim import Scenario, Strategy, calibrate, frontier, run_scenario

warnings.simplefilter("ignore", UserWarning)

measured = [
    (Scenario("mae-5b", Strategy.hybrid(2), 32), 1509.0),
    (Scenario("mae-5b", Strategy.full_shard(), 32), 1307.0),
]

fit = calibrate(measured, frontier(1))
print("== Fit ==")
print(f"  compute efficiency:      {fit.compute_efficiency:.3f} of peak")
print(f"  effective latency scale: {fit.effective_latency_scale:.2f}x")
print(f"  residual (sum sq. rel.): {fit.residual:.2e}")
print()

kwargs = dict(compute_efficiency=fit.compute_efficiency,
              latency_scale=fit.effective_latency_scale)

print("== Reproduction of the fitted points ==")
for scenario, target in measured:
    metrics = run_scenario(scenario, frontier(1), **kwargs)
    print(f"  {scenario.strategy.label:<8} {metrics.images_per_second:7.1f} ips "
          f"(measured {target:.0f})")
print()

print("== Out-of-fit predictions under the same calibration ==")
fraction = run_scenario(Scenario("mae-3b", Strategy.no_shard(), 64),
                        frontier(1), **kwargs)
print(f"  3B no-shard at 64 nodes: {fraction.comm_fraction:.1%} of the step "
      f"is exposed communication")

for model in ("mae-base", "mae-3b"):
    previous = None
    flat_at = None
    for nodes in (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048):
        ips = run_scenario(Scenario(model, Strategy.full_shard(), nodes),
                           frontier(1), **kwargs).images_per_second
        if previous is not None and ips / previous < 1.05:
            flat_at = nodes
            break
        previous = ips
    print(f"  {model} full-shard stops scaling (gain < 5%/doubling) at "
          f"{flat_at or '>2048'} nodes")
print()
print("Small models hit the communication wall at far fewer nodes than large")
print("ones: the per-unit payloads are smaller, so latency dominates earlier.")
