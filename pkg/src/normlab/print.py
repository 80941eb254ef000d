# SPDX-FileCopyrightText: 2022 Barndollar Music, Ltd.
#
# SPDX-License-Identifier: Apache-2.0

"""Console output. Everything a person reads goes through here."""

import sys

import colorama

_BANNER_RULE = "=" * 80


def print_init():
    """Enables ANSI colors on consoles that need translating (Windows)."""
    colorama.init()


def _style(text: str, *codes: str) -> str:
    return "".join(codes) + text + colorama.Style.RESET_ALL


class Phrases:
    NORMLAB_PREFIX = _style("[normlab]", colorama.Style.DIM)
    ERROR = _style("ERROR", colorama.Style.BRIGHT, colorama.Fore.RED)
    FAIL = _style("FAIL", colorama.Style.BRIGHT, colorama.Fore.RED)
    PASS = _style("PASS", colorama.Style.BRIGHT, colorama.Fore.GREEN)
    SUCCESS = _style("SUCCESS", colorama.Style.BRIGHT, colorama.Fore.GREEN)
    WARNING = _style("WARNING", colorama.Style.BRIGHT, colorama.Fore.YELLOW)


def _prefixed(text: str, label: str = ""):
    head = f"{Phrases.NORMLAB_PREFIX} {label}: " if label else f"{Phrases.NORMLAB_PREFIX} "
    print(head + text)


def print_error_exit(err_msg: str):
    """Reports err_msg and exits with status 1."""
    _prefixed(f"{err_msg}\n", Phrases.ERROR)
    sys.exit(1)


def print_success(msg: str):
    _prefixed(msg, Phrases.SUCCESS)


def print_warning(warn_msg: str):
    _prefixed(warn_msg, Phrases.WARNING)


def print_info(info_msg: str):
    _prefixed(info_msg)


def print_verbose(verbose_msg: str):
    """Progress detail, dimmed. Callers gate it on Context.verbose."""
    _prefixed(_style(verbose_msg, colorama.Style.DIM))


def print_plain(text: str):
    """Uncolored and unprefixed, for lines other programs parse."""
    print(text)


def print_blank_line():
    print()


def print_bold(text: str):
    print(_style(text, colorama.Style.BRIGHT))


def print_banner(heading: str):
    print_blank_line()
    for line in (_BANNER_RULE, heading, _BANNER_RULE):
        print_bold(line)
    print_blank_line()


def print_ind2(text: str):
    print(f"  {text}")


def pass_fail(ok: bool) -> str:
    return Phrases.PASS if ok else Phrases.FAIL


def blue_field(field_name: str) -> str:
    return _style(field_name, colorama.Fore.BLUE)


def cyan_field(field_name: str) -> str:
    return _style(field_name, colorama.Fore.CYAN)


def yellow_text(text: str) -> str:
    return _style(text, colorama.Fore.YELLOW)
