"""Field-evaluation counters threaded through rendering and training."""


class Counters:
    def __init__(self):
        self._c = {}

    def add(self, name: str, n: int = 1):
        self._c[name] = self._c.get(name, 0) + int(n)

    def get(self, name: str) -> int:
        return self._c.get(name, 0)

    def total(self, *names) -> int:
        return sum(self._c.get(n, 0) for n in names)

    def color_evaluations(self) -> int:
        """Points pushed through any color decoder (the bench metric)."""
        return self.total("color_points", "hand_color_points", "face_color_points")

    def sdf_evaluations(self) -> int:
        return self.total("body_sdf_points", "hand_sdf_points", "face_sdf_points")

    def as_dict(self) -> dict:
        return dict(self._c)

    def merge(self, other: "Counters"):
        for k, v in other._c.items():
            self.add(k, v)

    def __repr__(self):
        return f"Counters({self._c})"
