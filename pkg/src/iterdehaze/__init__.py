"""iterdehaze: single-image dehazing with iteratively updated physical priors.

Layers of the package:

  autodiff    dense NCHW tensors, reverse-mode AD, Adam, gradient checking
  scattering  haze formation physics and the dark-channel-prior baseline
  estimators  transmission-map and atmospheric-light estimation networks
  dehazer     the recurrent conv-LSTM dehazer with prior updater networks
  quality     losses (L1/MSE/SSIM/perceptual) and metrics (PSNR/SSIM/CIEDE2000)
  pipeline    synthetic data generation, staged training, checkpoints, ablations
  imgio       binary PPM/PGM image files
  report      delimited metric tables plus matplotlib figures
  cli         command-line front end
"""

import os as _os

# honor the thread-count override before numpy (and its BLAS) loads; a no-op
# if numpy was already imported by the host process
if "ITERDEHAZE_THREADS" in _os.environ:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["ITERDEHAZE_THREADS"])

__version__ = "0.1.0"
