"""Weak-scaling sweeps: throughput, ideal scaling, and communication share.

Run with `python demos/04_weak_scaling.py`.
"""

import warnings

from shardsim import IoModel, Scenario, Strategy, frontier, run_scenario, sweep

warnings.simplefilter("ignore", UserWarning)

print("== Masked-autoencoder 3B pretraining, no-shard, growing node counts ==")
table = sweep(["mae-3b"], [Strategy.no_shard()], [1, 2, 4, 8, 16, 32, 64],
              frontier(1))
print(table.to_csv())
print("Throughput trails the ideal column as the gradient all-reduce rings")
print("grow; the comm_fraction column is the share of the step the collective")
print("time fails to hide under backward compute.")
print()

print("== Strategy shoot-out for a model that needs two GPUs (5B) ==")
table = sweep(["mae-5b"],
              [Strategy.full_shard(), Strategy.grad_op_shard(),
               Strategy.hybrid(2), Strategy.hybrid(8)],
              [2, 8, 32], frontier(1))
print(table.to_csv())
print()

print("== An input pipeline only matters if it is slower than the step ==")
scenario = Scenario("mae-3b", Strategy.no_shard(), nodes=4)
synthetic = run_scenario(scenario, frontier(1))
for rate in (4.0, 64.0):
    real = run_scenario(scenario, frontier(1), io=IoModel(rate))
    bound = "input-bound" if real.io_seconds > synthetic.step_seconds \
        else "compute/communication-bound"
    print(f"  {rate:6.1f} img/s/rank: step {real.step_seconds:6.2f} s "
          f"({bound})")
print(f"  no input stage:   step {synthetic.step_seconds:6.2f} s")
