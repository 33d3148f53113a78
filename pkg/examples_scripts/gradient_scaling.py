"""Gradient norms of local versus global-offset parameters as a mesh moves further.

The same image loss is pulled back two ways. Through the face frame the
local gradient is ``J^T g``; its size is capped by the largest singular value
of ``J``. An offset decoder that must reach displacement ``D`` sees ``D g``,
which grows with the motion.

    python examples_scripts/gradient_scaling.py
"""

from texrig.scaling import format_report, gradient_scaling_report

rows = gradient_scaling_report()
print(format_report(rows))
first, last = rows[0], rows[-1]
print(f"\ndisplacement grew x{last.displacement / first.displacement:.1f}: offset gradient "
      f"x{last.offset_grad_norm / first.offset_grad_norm:.1f}, local gradient "
      f"x{last.local_grad_norm / first.local_grad_norm:.2f}")
