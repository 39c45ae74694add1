# src/harqage/config/merge.py

from typing import Any


def overlay(dest: dict[str, Any], src: dict[str, Any]) -> list[str]:
    """
    Write the flat layer ``src`` over ``dest`` in place.

    Lists are replaced, not appended.

    :return: Keys whose value was added or changed, in ``src`` order.
    """
    changed = [key for key, value in src.items() if key not in dest or dest[key] != value]
    dest.update(src)
    return changed


def flatten_sections(data: dict[str, Any]) -> dict[str, Any]:
    """
    Lift section contents into one flat key space.

    ``{'train': {'batch_size': 8}}`` and ``{'train.batch_size': 8}`` both become
    ``{'batch_size': 8}``. Section names carry no meaning of their own because
    every field name is unique across the configuration models.
    """
    flat: dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, dict):
            flat.update(flatten_sections(value))
        elif '.' in key:
            flat[key.rsplit('.', 1)[1]] = value
        else:
            flat[key] = value
    return flat
