"""Network definitions for 32x32 RGB inputs.

CIFAR-style variants: ResNet18 and MobileNetV2 keep a stride-1 stem, the VGG
nets end in a global pool over the last 1x1 map. Every architecture accepts a
``width`` multiplier so the same topology can be exercised at toy scale.
"""

from collections import OrderedDict

import torch
from torch import nn


def _ch(c, width):
    return max(1, int(round(c * width)))


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    def __init__(self, num_outputs=10, width=1.0):
        super().__init__()
        widths = [_ch(c, width) for c in (64, 128, 256, 512)]
        self.in_planes = widths[0]
        self.conv1 = nn.Conv2d(3, widths[0], 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(widths[0])
        self.layer1 = self._make_layer(widths[0], 2, 1)
        self.layer2 = self._make_layer(widths[1], 2, 2)
        self.layer3 = self._make_layer(widths[2], 2, 2)
        self.layer4 = self._make_layer(widths[3], 2, 2)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.flatten = nn.Flatten()
        self.linear = nn.Linear(widths[3], num_outputs)

    def _make_layer(self, planes, blocks, stride):
        layers = []
        for s in [stride] + [1] * (blocks - 1):
            layers.append(BasicBlock(self.in_planes, planes, s))
            self.in_planes = planes
        return nn.Sequential(*layers)

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        return self.linear(self.flatten(self.pool(out)))


VGG_CFG = {
    "vgg11": [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    "vgg16_bn": [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"],
}


class VGG(nn.Module):
    """VGG with batch norm. Layers are named ``conv<i>``, ``bn<i>``, ``relu<i>``, ``pool<j>``.

    For VGG16 the second-to-last convolution (``conv12``) sees a 2x2 map, so
    its 512-channel activation flattens to 2048 features.
    """

    def __init__(self, cfg, num_outputs=10, width=1.0):
        super().__init__()
        layers = OrderedDict()
        in_ch, conv_i, pool_i = 3, 0, 0
        for v in cfg:
            if v == "M":
                pool_i += 1
                layers[f"pool{pool_i}"] = nn.MaxPool2d(2, 2)
            else:
                conv_i += 1
                out_ch = _ch(v, width)
                layers[f"conv{conv_i}"] = nn.Conv2d(in_ch, out_ch, 3, padding=1)
                layers[f"bn{conv_i}"] = nn.BatchNorm2d(out_ch)
                layers[f"relu{conv_i}"] = nn.ReLU(inplace=False)
                in_ch = out_ch
        self.num_convs = conv_i
        self.features = nn.Sequential(layers)
        self.flatten = nn.Flatten()
        self.classifier = nn.Linear(in_ch, num_outputs)

    def forward(self, x):
        return self.classifier(self.flatten(self.features(x)))


class InvertedResidual(nn.Module):
    def __init__(self, in_ch, out_ch, expansion, stride):
        super().__init__()
        self.use_res = stride == 1 and in_ch == out_ch
        hidden = in_ch * expansion
        layers = []
        if expansion != 1:
            layers += [nn.Conv2d(in_ch, hidden, 1, bias=False), nn.BatchNorm2d(hidden), nn.ReLU6()]
        layers += [
            nn.Conv2d(hidden, hidden, 3, stride, 1, groups=hidden, bias=False),
            nn.BatchNorm2d(hidden),
            nn.ReLU6(),
            nn.Conv2d(hidden, out_ch, 1, bias=False),
            nn.BatchNorm2d(out_ch),
        ]
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        out = self.block(x)
        return x + out if self.use_res else out


class MobileNetV2(nn.Module):
    # (expansion, out channels, repeats, stride); strides of the first two stages
    # are 1 for 32x32 inputs
    CFG = [(1, 16, 1, 1), (6, 24, 2, 1), (6, 32, 3, 2), (6, 64, 4, 2),
           (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]

    def __init__(self, num_outputs=10, width=1.0):
        super().__init__()
        in_ch = _ch(32, width)
        layers = [nn.Conv2d(3, in_ch, 3, 1, 1, bias=False), nn.BatchNorm2d(in_ch), nn.ReLU6()]
        for t, c, n, s in self.CFG:
            out_ch = _ch(c, width)
            for i in range(n):
                layers.append(InvertedResidual(in_ch, out_ch, t, s if i == 0 else 1))
                in_ch = out_ch
        last = _ch(1280, width)
        layers += [nn.Conv2d(in_ch, last, 1, bias=False), nn.BatchNorm2d(last), nn.ReLU6()]
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.flatten = nn.Flatten()
        self.classifier = nn.Linear(last, num_outputs)

    def forward(self, x):
        return self.classifier(self.flatten(self.pool(self.features(x))))


class ViT(nn.Module):
    """Patch-4 vision transformer: 6 pre-norm blocks, 256-dim tokens, 8 heads at width 1."""

    def __init__(self, num_outputs=10, width=1.0, patch=4, depth=6, dim=256, heads=8):
        super().__init__()
        dim = max(heads, int(round(dim * width / heads)) * heads)
        self.patch_embed = nn.Conv2d(3, dim, patch, patch)
        num_patches = (32 // patch) ** 2
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.randn(1, num_patches + 1, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, dim * 2, dropout=0.0,
                                           activation="gelu", batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, num_outputs)

    def forward(self, x):
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos_embed
        tokens = self.norm(self.encoder(tokens))
        return self.head(tokens[:, 0])


class AutoEncoder(nn.Module):
    """Conv encoder f (3->32->64->128) and mirrored decoder g, pixel space in and out."""

    def __init__(self, width=1.0):
        super().__init__()
        c1, c2, c3 = (_ch(c, width) for c in (32, 64, 128))
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c1, 3, 1, 1), nn.ReLU(),
            nn.Conv2d(c1, c2, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(c2, c3, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(c3, c3, 3, 1, 1), nn.ReLU(),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(c3, c3, 3, 1, 1), nn.ReLU(),
            nn.ConvTranspose2d(c3, c2, 4, 2, 1), nn.ReLU(),
            nn.ConvTranspose2d(c2, c1, 4, 2, 1), nn.ReLU(),
            nn.Conv2d(c1, 3, 3, 1, 1), nn.Sigmoid(),
        )

    def forward(self, x):
        return self.decoder(self.encoder(x))


ARCH_IDS = ("resnet18", "vgg16_bn", "vgg11", "mobilenet_v2", "vit_small", "autoencoder")


def make_network(arch_id, num_outputs, width=1.0):
    if arch_id == "resnet18":
        return ResNet18(num_outputs, width)
    if arch_id in ("vgg16_bn", "vgg11"):
        return VGG(VGG_CFG[arch_id], num_outputs, width)
    if arch_id == "mobilenet_v2":
        return MobileNetV2(num_outputs, width)
    if arch_id == "vit_small":
        return ViT(num_outputs, width)
    if arch_id == "autoencoder":
        return AutoEncoder(width)
    raise KeyError(arch_id)


# hook used for feature extraction when no layer is named explicitly
DEFAULT_FEATURE_LAYER = {
    "vgg16_bn": "features.relu12",
    "vgg11": "features.relu7",
    "resnet18": "layer4",
    "mobilenet_v2": "features",
    "vit_small": "norm",
    "autoencoder": "encoder",
}
