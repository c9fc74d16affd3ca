import torch


def randomize_module(module: torch.nn.Module, seed: int, scale: float = 1.0) -> None:
    """Fill every parameter with uniform noise at its fan-in scale.

    Several defaults zero-initialize output layers; reversibility and
    causality tests want fully random weights to exercise the general case.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            fan_in = p.shape[1] * p[0, 0].numel() if p.dim() > 1 else p.numel()
            s = scale / float(fan_in) ** 0.5
            p.uniform_(-s, s, generator=gen)
