import pytest
import torch

from robustevo import data, engine, genome, grammar, netbuilder


@pytest.fixture(scope="session")
def neronet_grammar():
    return grammar.load_grammar("neronet")


@pytest.fixture(scope="session")
def desk_grammar():
    return grammar.load_grammar("desk")


@pytest.fixture(scope="session")
def synth_splits():
    ds = data.synth_dataset(300, 3, 8, seed=0)
    return data.split(ds, data.SplitSpec((600, 150, 150), 0))


@pytest.fixture(scope="session")
def trained_desk(synth_splits, desk_grammar):
    """Seed desk network after 300 standard training steps (shared, treat as read-only)."""
    tr, co, fi = synth_splits
    plan = genome.decode_genome(genome.seed_genome("desk"), desk_grammar, (8, 8, 3))
    net = netbuilder.build(plan, 3, seed=0)
    engine.train(net, tr, co, engine.TrainConfig.from_attrs(plan.metadata, budget=300),
                 engine.OptimizerConfig.from_attrs(plan.metadata))
    net.eval()
    return net, fi


class TinyConvNet(torch.nn.Module):
    """Small BN-free conv net used where attacks need a fast differentiable model."""

    def __init__(self, n_classes=3, seed=0, size=8):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.conv = torch.nn.Conv2d(3, 4, 3, padding=1)
        self.fc = torch.nn.Linear(4 * size * size, n_classes)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=g) * 0.5)

    def forward(self, x):
        return self.fc(torch.tanh(self.conv(x)).flatten(1))


@pytest.fixture
def tiny_net():
    return TinyConvNet().eval()


def batch(n, seed=0, size=8, n_classes=3):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((n, 3, size, size), generator=g), torch.randint(0, n_classes, (n,), generator=g)
