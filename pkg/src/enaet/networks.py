"""Wide-ResNet backbone split into encoder / classifier, plus AET decoders.

The network is a stem convolution followed by three residual groups. The
stem and the first two groups form the encoder; the last group, pooling and
the linear head form the classifier. Every decoder is a fresh copy of that
last group whose input is the channel-wise concatenation of the encodings of
an image and of its transformed version.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class BasicBlock(nn.Module):
    def __init__(self, in_planes, out_planes, stride, bn_momentum=0.1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes, momentum=bn_momentum)
        self.conv1 = nn.Conv2d(in_planes, out_planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_planes, momentum=bn_momentum)
        self.conv2 = nn.Conv2d(out_planes, out_planes, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_planes != out_planes:
            self.shortcut = nn.Conv2d(in_planes, out_planes, 1, stride=stride, bias=False)

    def forward(self, x):
        o = F.relu(self.bn1(x))
        y = self.conv1(o)
        y = self.conv2(F.relu(self.bn2(y)))
        if self.shortcut is not None:
            x = self.shortcut(o)
        return x + y


def wide_group(in_planes, out_planes, num_blocks, stride, bn_momentum=0.1):
    layers = [BasicBlock(in_planes, out_planes, stride, bn_momentum)]
    layers += [BasicBlock(out_planes, out_planes, 1, bn_momentum) for _ in range(num_blocks - 1)]
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    def __init__(self, channels, num_blocks, bn_momentum=0.1):
        super().__init__()
        self.stem = nn.Conv2d(3, channels[0], 3, padding=1, bias=False)
        self.group1 = wide_group(channels[0], channels[1], num_blocks, 1, bn_momentum)
        self.group2 = wide_group(channels[1], channels[2], num_blocks, 2, bn_momentum)
        self.out_channels = channels[2]

    def forward(self, x):
        return self.group2(self.group1(self.stem(x)))


class Head(nn.Module):
    """Last residual group + BN-ReLU + global average pool + linear layer."""

    def __init__(self, in_planes, planes, num_blocks, out_dim, bn_momentum=0.1):
        super().__init__()
        self.group = wide_group(in_planes, planes, num_blocks, 2, bn_momentum)
        self.bn = nn.BatchNorm2d(planes, momentum=bn_momentum)
        self.fc = nn.Linear(planes, out_dim)

    def forward(self, feats):
        x = F.relu(self.bn(self.group(feats)))
        return self.fc(x.mean((2, 3)))


@dataclass
class BatchPrediction:
    logits: torch.Tensor

    @property
    def probs(self) -> torch.Tensor:
        return F.softmax(self.logits, dim=1)


def init_weights(module: nn.Module):
    """He fan-in init for convolutions and the linear layer, zero biases, unit BN scale."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="linear")
            nn.init.zeros_(m.bias)


class NetworkBundle(nn.Module):
    """Encoder E, classifier C and decoders D_k under one module.

    Inputs are [0, 1] images; per-channel normalization happens here so that
    transformations can be applied in pixel space upstream.
    """

    def __init__(self, num_classes, param_counts=(), width=2, depth=28, base_channels=16,
                 mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0), bn_momentum=0.1):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        if depth < 10 or (depth - 4) % 6:
            raise ValueError(f"depth must be 6n+4 with n >= 1, got {depth}")
        if width < 1 or base_channels < 1:
            raise ValueError(f"width and base_channels must be positive, got {width}, {base_channels}")
        n = (depth - 4) // 6
        ch = [base_channels, base_channels * width, 2 * base_channels * width, 4 * base_channels * width]
        self.num_classes = num_classes
        self.param_counts = tuple(int(p) for p in param_counts)
        self.arch = dict(width=width, depth=depth, base_channels=base_channels)

        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))
        self.encoder = Encoder(ch[:3], n, bn_momentum)
        self.classifier = Head(ch[2], ch[3], n, num_classes, bn_momentum)
        init_weights(self.encoder)
        init_weights(self.classifier)
        # Decoders are created after the backbone is initialized so the
        # backbone draws the same random numbers with or without them.
        self.decoders = nn.ModuleList(Head(2 * ch[2], ch[3], n, k, bn_momentum) for k in self.param_counts)
        init_weights(self.decoders)

    def backbone_parameters(self):
        return [*self.encoder.parameters(), *self.classifier.parameters()]

    def decoder_parameters(self):
        return list(self.decoders.parameters())

    def encode(self, images):
        return self.encoder((images - self.mean) / self.std)

    def classify(self, images):
        return self.classifier(self.encode(images))

    def forward(self, images):
        return self.classify(images)


def build_networks(num_classes, param_counts=(8, 6, 4, 3, 4), width=2, depth=28, base_channels=16,
                   mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0), ema=True):
    """Student bundle plus an exact-copy teacher (or ``None`` when ``ema`` is off)."""
    student = NetworkBundle(num_classes, param_counts, width, depth, base_channels, mean, std)
    teacher = None
    if ema:
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
    return student, teacher


def forward(bundle: NetworkBundle, images, transformed=(), decode=True):
    """Shared-weight pass over ``images`` and each transformed batch.

    Returns the prediction for the original batch, one prediction per
    transformed batch, and one regressed parameter tensor per decoder (an
    empty list when ``decode`` is false). All batches go through the encoder
    in a single call so batch-norm statistics are shared across the Siamese
    branches.
    """
    transformed = list(transformed)
    if len(transformed) > len(bundle.decoders):
        raise ValueError(f"{len(transformed)} transformed batches but only {len(bundle.decoders)} decoders")
    for t in transformed:
        if t.shape != images.shape:
            raise ValueError(f"transformed batch shape {tuple(t.shape)} != {tuple(images.shape)}")
    n = images.shape[0]
    feats = bundle.encode(torch.cat([images, *transformed]) if transformed else images)
    logits = bundle.classifier(feats)
    chunks_f = feats.split(n)
    chunks_l = logits.split(n)
    pred = BatchPrediction(chunks_l[0])
    preds_t = [BatchPrediction(l) for l in chunks_l[1:]]
    params = []
    if decode:
        params = [dec(torch.cat([chunks_f[0], f], dim=1)) for dec, f in zip(bundle.decoders, chunks_f[1:])]
    return pred, preds_t, params


_FIXED_BUFFERS = ("mean", "std")


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, alpha: float) -> nn.Module:
    """teacher <- alpha * teacher + (1 - alpha) * student, elementwise.

    Floating buffers (batch-norm running statistics) are averaged the same
    way; integer buffers are copied.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    t_state, s_state = teacher.state_dict(), student.state_dict()
    if t_state.keys() != s_state.keys():
        raise ValueError("teacher and student have different parameter sets")
    for key, t in t_state.items():
        s = s_state[key]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {key}: {tuple(t.shape)} vs {tuple(s.shape)}")
        if t.is_floating_point() and key not in _FIXED_BUFFERS:
            t.mul_(alpha).add_(s * (1.0 - alpha))
        else:
            t.copy_(s)
    return teacher
