"""Label spaces: class names, the foreground subset and export colours."""
from dataclasses import dataclass

# column order of the per-class table in SSC reports
KITTI_REPORT_ORDER = (
    "car", "bicycle", "motorcycle", "truck", "other-vehicle", "person", "bicyclist",
    "motorcyclist", "road", "parking", "sidewalk", "other-ground", "building", "fence",
    "vegetation", "trunk", "terrain", "pole", "traffic-sign",
)


@dataclass(frozen=True)
class LabelSpace:
    names: tuple
    foreground: tuple
    colors: tuple

    def __post_init__(self):
        if not self.names or self.names[0] != "empty":
            raise ValueError("class 0 must be 'empty'")
        if len(self.colors) != len(self.names):
            raise ValueError("one colour per class")
        unknown = set(self.foreground) - set(self.names)
        if unknown:
            raise ValueError(f"foreground classes not in label space: {sorted(unknown)}")

    @property
    def num_classes(self):
        return len(self.names)

    def index(self, name):
        return self.names.index(name)

    def foreground_ids(self):
        return tuple(self.names.index(n) for n in self.foreground)

    def report_order(self):
        """Semantic class ids (never 0) in benchmark table order."""
        known = [self.names.index(n) for n in KITTI_REPORT_ORDER if n in self.names]
        rest = [i for i in range(1, self.num_classes) if i not in known]
        return known + rest


SYNTHETIC = LabelSpace(
    names=("empty", "road", "building", "car", "person", "vegetation"),
    foreground=("car", "person"),
    colors=((0, 0, 0), (255, 0, 255), (255, 200, 0), (91, 155, 213),
            (255, 30, 30), (0, 175, 0)),
)

SEMANTIC_KITTI = LabelSpace(
    names=("empty",) + KITTI_REPORT_ORDER,
    foreground=("car", "bicycle", "motorcycle", "truck", "other-vehicle", "person",
                "bicyclist", "motorcyclist"),
    colors=((0, 0, 0), (91, 155, 213), (100, 230, 245), (30, 60, 150), (80, 30, 180),
            (0, 0, 255), (255, 30, 30), (255, 37, 199), (150, 30, 90), (255, 0, 255),
            (255, 150, 255), (75, 0, 75), (175, 0, 75), (255, 200, 0), (255, 120, 50),
            (0, 175, 0), (135, 60, 0), (150, 240, 80), (255, 240, 150), (255, 0, 0)),
)
