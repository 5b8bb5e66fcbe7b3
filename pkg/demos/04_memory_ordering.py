"""Peak live elements of the gather and mask realizations, measured with
the allocation meter and compared with the closed forms.

Run: python3 demos/04_memory_ordering.py
"""
from keysem.suites import run_bench

report, ok = run_bench(n_values=(64, 256, 1024), k_values=(16, 64, 256), k_fixed=16,
                       n_fixed=512, d=16, budget=1 << 22)
for title, sweep in (("N sweep (k=16)", report["n_sweep"]), ("k sweep (N=512)", report["k_sweep"])):
    print(title)
    for p in sweep:
        print(f"  N={p['N']:5d} k={p['k']:4d}  gather {p['gather']['peak_analytic']:>9,}"
              f"  mask {p['mask']['peak_analytic']:>9,}  measured: "
              f"{p['gather']['measured']} / {p['mask']['measured']}")
print("orderings:", {k: v for k, v in report["orderings"].items() if k != "holds"})
