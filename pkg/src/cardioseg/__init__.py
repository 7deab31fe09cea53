"""Cardiac MRI segmentation toolkit.

3D U-Net left-ventricle/myocardium segmentation with papillary-muscle
exclusion, trained and evaluated end to end on synthetic phantoms:
a small numpy layer engine with hand-written gradients, NIfTI-1 I/O,
mask cleaning, overlap metrics, clinical volumetry (EDV/ESV/LVEF/mass),
Bland-Altman agreement statistics and marching-cubes surface export.
"""

__version__ = "0.1.0"
