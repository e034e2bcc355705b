import sys
from pathlib import Path

import torch

# Let test modules import the sibling oracles module regardless of how
# pytest was invoked.
sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)
