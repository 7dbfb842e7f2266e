"""Closed-form overlay curves passed through CSV metadata.

The renderers never recompute physics.  When the producer wants an analytic
curve drawn over its data it writes a metadata line such as

    # overlay_fidelity = 1 - 0.5*exp(-12.566370614359172*t_us)

and this module evaluates that expression over the table's time column.
The grammar is a whitelist: numbers, the variable t_us, arithmetic, and a
few one-argument functions.  Anything else is rejected, so a CSV can never
smuggle code into the renderer.
"""

import ast

import numpy as np


class OverlayError(Exception):
    """Overlay expression outside the supported grammar."""


_FUNCTIONS = {
    "exp": np.exp,
    "sqrt": np.sqrt,
    "log": np.log,
    "sin": np.sin,
    "cos": np.cos,
}

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


def evaluate(expression: str, t_us) -> np.ndarray:
    """Evaluate an overlay expression with t_us bound to the given array."""
    try:
        tree = ast.parse(expression, mode="eval")
    except SyntaxError as exc:
        raise OverlayError(
            f"overlay expression {expression!r} does not parse: {exc.msg}"
        ) from None
    t_us = np.asarray(t_us, dtype=float)

    def walk(node):
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id == "t_us":
                return t_us
            raise OverlayError(
                f"unknown name {node.id!r} in overlay expression {expression!r}"
            )
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            value = walk(node.operand)
            return -value if isinstance(node.op, ast.USub) else value
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](walk(node.left), walk(node.right))
        if (
            isinstance(node, ast.Call)
            and isinstance(node.func, ast.Name)
            and node.func.id in _FUNCTIONS
            and len(node.args) == 1
            and not node.keywords
        ):
            return _FUNCTIONS[node.func.id](walk(node.args[0]))
        raise OverlayError(
            f"unsupported syntax {type(node).__name__} in overlay "
            f"expression {expression!r}"
        )

    return walk(tree)


def overlays(table) -> dict:
    """All overlay expressions a table's metadata declares, keyed by name."""
    prefix = "overlay_"
    return {
        key[len(prefix):]: value
        for key, value in table.meta.items()
        if key.startswith(prefix)
    }


def draw_overlays(ax, table, x_name: str = "t_us") -> None:
    """Draw every declared overlay against the table's x column."""
    declared = overlays(table)
    if not declared:
        return
    x = table.floats(x_name)
    for name, expression in sorted(declared.items()):
        ax.plot(x, evaluate(expression, x), color="black", linestyle=":",
                linewidth=1.0, label=f"{name} (closed form)")
