"""safemon: synthesize runtime safety monitors for image classifiers.

The pipeline degrades a clean corpus over a grid of perturbation
intensities, maps classifier accuracy over that grid, labels the grid
against safety thresholds, trains a monitor to predict the safety level of
incoming frames, and deploys monitor plus classifier behind a debounced
safety-mode state machine.
"""

__version__ = "0.1.0"
