"""The four sparsity schedules over a 1000-update run."""

from maskcond import SparsitySchedule

T = 1000
schedules = {
    "constant": SparsitySchedule.constant(0.5, T),
    "linear": SparsitySchedule.linear(0.1, 0.25, T),
    "step": SparsitySchedule.step(0.1, 0.25, 5, T),
    "exponential": SparsitySchedule.exponential(0.1, 0.25, T),
}

print(f"{'t':>6}" + "".join(f"{k:>13}" for k in schedules))
for t in range(0, T + 1, 125):
    print(f"{t:>6}" + "".join(f"{s(t):>13.5f}" for s in schedules.values()))

# step never reaches p_end, exponential stops at ~63% of the span
print("step end:", schedules["step"](T), "exp end:", schedules["exponential"](T))
