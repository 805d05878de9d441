import pathlib
import typing

from ruamel.yaml import YAML


def yaml_loads(yaml_text: str) -> typing.Any:
    return YAML(typ="safe").load(yaml_text)


def parse_config(text: str) -> typing.Dict[str, typing.Any]:
    """
    Parses key=value lines. Values are typed like yaml scalars
    (1e-4 -> float, 20 -> int, true -> bool, dqam -> str).
    Blank lines and # comments are skipped, hyphens in keys become underscores.
    :param text: file contents
    :return: settings in file order
    """
    settings = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"Line {number}: expected key=value, got '{line}'")
        value = value.strip()
        settings[key.strip().replace("-", "_")] = yaml_loads(value) if value else None
    return settings


def read_config(path: typing.Union[str, pathlib.Path]) -> typing.Dict[str, typing.Any]:
    with open(path, "r") as f:
        return parse_config(f.read())
