"""Feature extractor, expandable classifier, predictor head and teacher snapshots."""

from __future__ import annotations

import copy
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError, StateError


def conv_block(c_in, c_out, pool):
    layers = [nn.Conv2d(c_in, c_out, 3, padding=1, bias=False), nn.BatchNorm2d(c_out),
              nn.ReLU(inplace=True)]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


class SmallConvNet(nn.Module):
    """Stack of conv-BN-ReLU blocks; the last block is not pooled.

    Returns the final feature maps ``(B, d, h', w')`` with ``d = widths[-1]``.
    """

    def __init__(self, widths=(32, 64, 128, 128), in_channels=3):
        super().__init__()
        blocks = []
        c = in_channels
        for i, w in enumerate(widths):
            blocks.append(conv_block(c, w, pool=i < len(widths) - 1))
            c = w
        self.blocks = nn.Sequential(*blocks)
        self.out_dim = c

    def forward(self, x):
        return self.blocks(x)


class ResNet18Maps(nn.Module):
    """torchvision ResNet-18 (random init) truncated before global pooling."""

    def __init__(self, small_input=True):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        if small_input:
            net.conv1 = nn.Conv2d(3, 64, 3, stride=1, padding=1, bias=False)
            net.maxpool = nn.Identity()
        self.body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                  net.layer1, net.layer2, net.layer3, net.layer4)
        self.out_dim = 512

    def forward(self, x):
        return self.body(x)


def build_extractor(name="small_cnn", widths=(32, 64, 128, 128)):
    if name == "small_cnn":
        return SmallConvNet(tuple(widths))
    if name == "resnet18":
        return ResNet18Maps()
    raise ParameterError(f"unknown backbone {name!r}")


class Predictor(nn.Module):
    """Single linear layer d -> d followed by ReLU."""

    def __init__(self, d, noise=0.01, generator=None):
        super().__init__()
        self.linear = nn.Linear(d, d)
        with torch.no_grad():
            eye = torch.eye(d)
            eps = torch.randn(d, d, generator=generator) * noise
            self.linear.weight.copy_(eye + eps)
            self.linear.bias.zero_()

    def forward(self, v):
        return F.relu(self.linear(v))


class ModelBundle(nn.Module):
    """Extractor + classifier over the seen classes, plus an optional predictor.

    Any extractor mapping images to ``(B, d, h', w')`` maps can be plugged in;
    features are always the spatial mean of those maps.
    """

    def __init__(self, extractor: nn.Module, d: int, input_size: int = 32, num_classes: int = 0):
        super().__init__()
        self.extractor = extractor
        self.d = d
        self.input_size = input_size
        self.weight = nn.Parameter(torch.empty(0, d))
        self.bias = nn.Parameter(torch.empty(0))
        self.predictor: Predictor | None = None
        if num_classes:
            self.expand(num_classes)

    @property
    def num_seen(self) -> int:
        return self.weight.shape[0]

    def extract(self, images):
        if images.dim() != 4 or images.shape[0] == 0:
            raise ShapeError(f"expected a non-empty (B, C, H, W) batch, got {tuple(images.shape)}")
        if images.shape[-2:] != (self.input_size, self.input_size):
            raise ShapeError(
                f"expected {self.input_size}x{self.input_size} inputs, got {tuple(images.shape[-2:])}"
            )
        maps = self.extractor(images)
        if maps.shape[1] != self.d:
            raise ShapeError(f"extractor produced {maps.shape[1]} channels, bundle expects {self.d}")
        return maps.mean(dim=(2, 3)), maps

    def classify(self, features):
        if features.shape[-1] != self.d:
            raise ShapeError(f"feature dim {features.shape[-1]} != {self.d}")
        return F.linear(features, self.weight, self.bias)

    def forward(self, images):
        return self.classify(self.extract(images)[0])

    def expand(self, num_new: int, generator=None):
        """Append ``num_new`` classifier rows; existing rows are kept bit-exact."""
        if num_new < 1:
            raise ParameterError(f"num_new must be >= 1, got {num_new}")
        bound = 1.0 / math.sqrt(self.d)
        ref = self.weight
        new_w = (torch.rand(num_new, self.d, generator=generator, dtype=ref.dtype) * 2 - 1) * bound
        with torch.no_grad():
            w = torch.cat([ref.detach(), new_w.to(ref.device)])
            b = torch.cat([self.bias.detach(), torch.zeros(num_new, dtype=ref.dtype, device=ref.device)])
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(b)
        return self

    def attach_predictor(self, teacher, noise=0.01, generator=None):
        if teacher is None:
            raise StateError("a predictor can only be attached while a teacher exists")
        if self.predictor is not None:
            raise StateError("predictor already attached")
        if teacher.d != self.d:
            raise ShapeError(f"teacher feature dim {teacher.d} != {self.d}")
        p = Predictor(self.d, noise, generator)
        self.predictor = p.to(dtype=self.weight.dtype, device=self.weight.device)
        return self

    def detach_predictor(self):
        self.predictor = None
        return self

    def predict(self, features):
        if self.predictor is None:
            raise StateError("no predictor attached")
        return self.predictor(features)

    def classifier_parameters(self):
        return [self.weight, self.bias]


class TeacherSnapshot:
    """Frozen deep copy of a bundle's extractor and classifier."""

    def __init__(self, bundle: ModelBundle):
        frozen = ModelBundle(copy.deepcopy(bundle.extractor), bundle.d, bundle.input_size)
        with torch.no_grad():
            frozen.weight = nn.Parameter(bundle.weight.detach().clone())
            frozen.bias = nn.Parameter(bundle.bias.detach().clone())
        frozen.to(bundle.weight.device)
        frozen.eval()
        for p in frozen.parameters():
            p.requires_grad_(False)
        self._model = frozen

    @property
    def d(self):
        return self._model.d

    @property
    def num_classes(self):
        return self._model.num_seen

    @property
    def model(self) -> ModelBundle:
        return self._model

    @torch.no_grad()
    def extract(self, images):
        return self._model.extract(images)

    @torch.no_grad()
    def logits(self, images):
        return self._model(images)

    def snapshot(self) -> "TeacherSnapshot":
        return TeacherSnapshot(self._model)


def snapshot_teacher(bundle) -> TeacherSnapshot:
    if isinstance(bundle, TeacherSnapshot):
        return bundle.snapshot()
    if bundle.num_seen == 0:
        raise StateError("cannot snapshot a bundle that has not learned any class")
    return TeacherSnapshot(bundle)


def build_bundle(backbone="small_cnn", widths=(32, 64, 128, 128), input_size=32):
    ext = build_extractor(backbone, widths)
    return ModelBundle(ext, ext.out_dim, input_size)


def save_checkpoint(path, bundle: ModelBundle, meta: dict):
    params = {k: v.detach().cpu().clone() for k, v in bundle.state_dict().items()}
    meta = dict(meta)
    meta.setdefault("d", bundle.d)
    meta.setdefault("num_seen", bundle.num_seen)
    torch.save({"params": params, "meta": meta}, path)


def load_checkpoint(path, bundle: ModelBundle):
    """Load parameters into ``bundle`` (resized to the stored class count)."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    params, meta = blob["params"], blob["meta"]
    if any(k.startswith("predictor.") for k in params):
        raise StateError(f"{path}: checkpoint unexpectedly carries predictor weights")
    n = params["weight"].shape[0]
    bundle.weight = nn.Parameter(torch.empty(n, bundle.d))
    bundle.bias = nn.Parameter(torch.empty(n))
    bundle.load_state_dict(params)
    return meta
