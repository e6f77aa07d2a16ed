import torch

# Everything here is deterministic CPU math; one thread keeps timings honest
# and avoids oversubscription when pytest runs several files.
torch.set_num_threads(1)
