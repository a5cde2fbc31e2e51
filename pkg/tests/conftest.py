import numpy as np
import pytest

from evadelab.env import load_config


@pytest.fixture(scope="session")
def world():
    return load_config("prisoner")


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences; the finite-difference oracle."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


@pytest.fixture(scope="session")
def small_corpus(world):
    from evadelab.pipeline import generate_dataset

    records, _ = generate_dataset(world, 48, seed=0, n_waypoints=10, iterations=500)
    return records


@pytest.fixture(scope="session")
def small_model(world, small_corpus):
    """Diffusion model briefly fitted to the small corpus; losses kept on ``model.loss_history``."""
    from evadelab.pipeline import train_diffusion_model

    model, _ = train_diffusion_model(small_corpus, world, steps=800, batch_size=48, seed=0)
    return model


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion and fail the test on FAIL."""

    def report(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)


SQRT2 = np.sqrt(2.0)


def dijkstra_grid(blocked: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> float:
    """Independent oracle: plain Dijkstra on the 8-connected grid with no corner cutting.

    Distances are tracked as integer (straight, diagonal) move counts, which are
    unique for a given length because sqrt(2) is irrational, so the returned
    ``straight + diagonal * sqrt(2)`` is exact. Returns inf when unreachable.
    """
    import heapq

    rows, cols = blocked.shape
    best = {start: (0, 0)}
    heap = [(0.0, 0, 0, start)]
    done = set()
    while heap:
        _, a, b, (r, c) = heapq.heappop(heap)
        if (r, c) in done:
            continue
        if (r, c) == goal:
            return a + b * SQRT2
        done.add((r, c))
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == dc == 0:
                    continue
                nr, nc = r + dr, c + dc
                if not (0 <= nr < rows and 0 <= nc < cols) or blocked[nr][nc]:
                    continue
                if dr and dc and (blocked[r + dr][c] or blocked[r][c + dc]):
                    continue
                na, nb = (a, b + 1) if dr and dc else (a + 1, b)
                key = na + nb * SQRT2
                old = best.get((nr, nc))
                if old is None or key < old[0] + old[1] * SQRT2:
                    best[(nr, nc)] = (na, nb)
                    heapq.heappush(heap, (key, na, nb, (nr, nc)))
    return float("inf")
