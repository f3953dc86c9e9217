import numpy as np
import pytest
import torch

from ifa import refnet as rn


class TorchRefNet(torch.nn.Module):
    """Torch twin of the reference CNN (gap_linear head)."""

    def __init__(self):
        super().__init__()
        self.conv1 = torch.nn.Conv2d(1, 8, 3, padding=1)
        self.conv2 = torch.nn.Conv2d(8, 16, 3, padding=1)
        self.pool1 = torch.nn.MaxPool2d(2)
        self.pool2 = torch.nn.MaxPool2d(2)
        self.head = torch.nn.Linear(16, 2)

    def forward(self, x):
        x = self.pool1(torch.relu(self.conv1(x)))
        x = self.pool2(torch.relu(self.conv2(x)))
        return self.head(x.mean(dim=(2, 3)))


def torch_from_refnet(model: rn.RefNetModel) -> TorchRefNet:
    if model.head_kind != "gap_linear":
        raise ValueError("torch twin only mirrors the gap_linear head")
    twin = TorchRefNet()
    with torch.no_grad():
        twin.conv1.weight.copy_(torch.from_numpy(model.conv1_w))
        twin.conv1.bias.copy_(torch.from_numpy(model.conv1_b))
        twin.conv2.weight.copy_(torch.from_numpy(model.conv2_w))
        twin.conv2.bias.copy_(torch.from_numpy(model.conv2_b))
        twin.head.weight.copy_(torch.from_numpy(model.head_w))
        twin.head.bias.copy_(torch.from_numpy(model.head_b))
    return twin.eval()


@pytest.fixture(scope="session")
def dataset():
    ds = rn.gen_dataset(9, 40)
    return [(ds.images[i], int(ds.labels[i])) for i in range(len(ds))]


@pytest.fixture(scope="session")
def torch_model():
    trained = rn.train(rn.gen_dataset(9, 40), "gap_linear", epochs=2, seed=0)
    return torch_from_refnet(trained)
