"""Train the small model on a single noisy synthetic image and save the
restored result next to the noisy input.

Run: python3 demos/05_toy_denoise.py [output_dir]
"""
import os
import sys

from keysem import write_pnm
from keysem.suites import run_denoise, synthetic_target

out_dir = sys.argv[1] if len(sys.argv) > 1 else "denoise_demo"
os.makedirs(out_dir, exist_ok=True)

clean = synthetic_target(32, 32)
report, ok, restored, _ = run_denoise(clean, steps=120,
                                      checkpoint_path=os.path.join(out_dir, "model.ksem"))
curve = report["loss_curve"]
for step in range(0, len(curve), 20):
    print(f"step {step:3d}  L1 {curve[step]:.4f}")
print(f"eval L1 {report['initial_loss']:.4f} -> {report['final_loss']:.4f}"
      f" (ratio {report['ratio']:.2f})")
write_pnm(os.path.join(out_dir, "clean.pgm"), clean)
write_pnm(os.path.join(out_dir, "restored.pgm"), restored)
print("wrote", out_dir)
