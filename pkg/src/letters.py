"""Letter classes A-Z and their integer indices."""

import string

LETTERS: tuple[str, ...] = tuple(string.ascii_uppercase)
NUM_CLASSES = len(LETTERS)


def letter_index(letter) -> int:
    """Return the class index 0..25 for 'A'..'Z' (integer indices pass through)."""
    if isinstance(letter, str):
        if letter not in LETTERS:
            raise ValueError(f"Not an uppercase Latin letter: {letter!r}")
        return LETTERS.index(letter)
    index = int(letter)
    if not 0 <= index < NUM_CLASSES:
        raise ValueError(f"Letter index out of range: {letter}")
    return index


def letter_name(index) -> str:
    return LETTERS[letter_index(index)]
