import ast
from pathlib import Path

DEV_TOOLS = {"pytest", "black", "isort", "mypy", "flake8", "pre-commit"}


def _setup_keywords():
    tree = ast.parse((Path(__file__).parent / "setup.py").read_text())
    calls = (node for node in ast.walk(tree) if isinstance(node, ast.Call))
    call = next(node for node in calls if getattr(node.func, "id", "") == "setup")
    return {kw.arg: kw.value for kw in call.keywords}


def _names(requirements):
    return {req.split(">")[0].split("=")[0].strip() for req in requirements}


def test_runtime_requirements_exclude_dev_tools():
    keywords = _setup_keywords()
    runtime = _names(ast.literal_eval(keywords["install_requires"]))
    assert not runtime & DEV_TOOLS
    assert {"torch", "numpy", "pydantic", "plyfile"} <= runtime
    extras = ast.literal_eval(keywords["extras_require"])
    assert _names(extras["dev"]) == DEV_TOOLS


def test_top_level_modules_are_packaged():
    modules = ast.literal_eval(_setup_keywords()["py_modules"])
    for module in modules:
        assert (Path(__file__).parent / f"{module}.py").exists()
    assert "evaluation" in modules
