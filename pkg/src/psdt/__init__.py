"""psdt: a desk-scale diffusion transformer for procedural sequence grids.

Trains with conditional flow matching on serpentine-layout frame grids,
adapts to multiple tasks with asymmetric LoRA (shared down-projection,
per-task up-projections), and reconstructs creation processes from a clean
tail frame via attention conditioning.
"""

__version__ = "0.1.0"
