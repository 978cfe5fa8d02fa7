"""Post-processing toolkit for quantitative T1rho maps of knee cartilage.

Standardisation to a reference frame, rule-based subregion parcellation,
voxelwise mono-exponential fitting and agreement statistics.
"""

__version__ = "0.1.0"
