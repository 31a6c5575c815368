"""Active-learning query strategies for 3D segmentation pools.

Core pieces: VOL1 voxel grids (volume), uncertainty scoring (uncertainty),
feature similarity (similarity), query strategies (selection), dataset
initialization (initialization), Dice evaluation (metrics), and a seeded
simulation harness with a synthetic predictor oracle (simulation). A FastAPI
service (service) and a file-based CLI (cli) expose the same operations.
"""

__version__ = "0.1.0"
