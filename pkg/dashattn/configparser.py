"""Reads the global configuration of dashattn.

Every knob is a descriptor registered with `AddConfigVar` under a dotted
name ("attention.alpha"). Its value is resolved once, on first access, from
(highest priority first) the DASHATTN_FLAGS environment variable, the rc
files named by DASHATTNRC (default ~/.dashattnrc) and the registered
default. The descriptor tree follows theano's config module.

Example rc file::

    [global]
    n_jobs = 4

    [attention]
    alpha = 2
    block_size = 32
"""
from configparser import ConfigParser, NoOptionError, NoSectionError
import os
import shlex
import warnings

import dashattn

TRUE_STRINGS = ('True', 'true', '1')
FALSE_STRINGS = ('False', 'false', '0')


class DashAttnConfigWarning(Warning):
    """Malformed entry in DASHATTN_FLAGS."""


def parse_config_string(config_string, issue_warnings=True):
    """Parses a config string (comma-separated key=value components) into
    a dict.

    Parameters
    ----------
    config_string: str
        String such as ``"attention.alpha=2,n_jobs=4"``.
    issue_warnings: bool
        Warn about keys without a value instead of silently ignoring them.

    Returns
    -------
    config_dict: dict
        Mapping from full option name to its (string) value; later entries
        win.
    """
    splitter = shlex.shlex(config_string, posix=True)
    splitter.whitespace = ','
    splitter.whitespace_split = True
    config_dict = {}
    for entry in (token.strip() for token in splitter):
        if not entry:
            continue
        if '=' not in entry:
            if issue_warnings:
                warnings.warn("Config key '%s' has no value, ignoring it" %
                              entry, DashAttnConfigWarning, stacklevel=2)
            continue
        key, value = entry.split('=', 1)
        config_dict[key.strip()] = value.strip()
    return config_dict


def parse_bool(value):
    """Boolean from a flag/rc string, a bool or 0/1; anything else raises
    ValueError."""
    if not isinstance(value, str):
        if value in (0, 1):
            return bool(value)
    elif value in FALSE_STRINGS:
        return False
    elif value in TRUE_STRINGS:
        return True
    raise ValueError("Not a boolean: %r" % (value,))


DASHATTN_FLAGS_DICT = parse_config_string(
    os.getenv(dashattn.DASHATTN_FLAGS_VAR, ""))

# DASHATTNRC is an os.pathsep-delimited list; files on the right win.
rc_files = [os.path.expanduser(path) for path in
            os.getenv(dashattn.DASHATTNRC_VAR,
                      dashattn.DASHATTNRC_FILE).split(os.pathsep)]
rc_parser = ConfigParser(interpolation=None)
rc_parser.read(rc_files)


def fetch_val_for_key(key, delete_key=False):
    """Returns the overriding string value of an option.

    DASHATTN_FLAGS beats the rc files; rc options without a section live
    in [global]. Raises KeyError when nobody overrides the key.
    """
    if key in DASHATTN_FLAGS_DICT:
        if delete_key:
            return DASHATTN_FLAGS_DICT.pop(key)
        return DASHATTN_FLAGS_DICT[key]
    section, _, option = key.rpartition('.')
    try:
        return rc_parser.get(section or 'global', option)
    except (NoOptionError, NoSectionError):
        raise KeyError(key)


_config_var_list = []


class DashAttnConfigParser(object):
    """Root of the configuration tree; options are class-level
    descriptors installed by `AddConfigVar`."""
    _i_am_a_config_class = True

    def __str__(self):
        lines = []
        for param in _config_var_list:
            lines += [str(param), "    Doc:  %s" % param.doc,
                      "    Value:  %s" % (param.__get__(True, None),), ""]
        return "\n".join(lines)


config = DashAttnConfigParser()


def AddConfigVar(name, doc, configparam, root=config):
    """Add a new variable to dashattn.config

    Parameters
    ----------
    name: str
        Full dotted name, "[section.]option".
    doc: str
        What does this variable specify?
    configparam: `ConfigParam`
        Descriptor holding the default and the value filter.
    root: object
        Node of the tree; only used by the recursion.
    """
    if root is config:
        configparam.fullname = name
    section, _, rest = name.partition('.')
    if rest:
        if not hasattr(root, section):
            # every section node needs a class of its own
            class SubObj(object):
                _i_am_a_config_class = True
            setattr(root.__class__, section, SubObj())
        node = getattr(root, section)
        if not getattr(node, '_i_am_a_config_class', False):
            raise TypeError("%s is an option, not a section" % section)
        return AddConfigVar(rest, doc, configparam, root=node)

    if hasattr(root, name):
        raise AttributeError('This name is already taken',
                             configparam.fullname)
    configparam.doc = doc
    # bad overrides fail at import time
    configparam.__get__(root, type(root), delete_key=True)
    setattr(root.__class__, name, configparam)
    _config_var_list.append(configparam)


class ConfigParam(object):
    """Descriptor of one option: a default and a filter that converts and
    validates every value assigned to it."""

    def __init__(self, default, filter=None):
        self.default = default
        self.filter = filter
        self.is_default = True
        # fullname and doc are set by AddConfigVar

    def __get__(self, cls, type_, delete_key=False):
        if cls is None:
            return self
        if not hasattr(self, 'val'):
            try:
                value = fetch_val_for_key(self.fullname, delete_key)
                self.is_default = False
            except KeyError:
                value = self.default
            self.__set__(cls, value)
        return self.val

    def __set__(self, cls, val):
        self.val = self.filter(val) if self.filter else val

    def __str__(self):
        return self.fullname


class EnumStr(ConfigParam):
    """One of a fixed set of strings, the first being the default."""

    def __init__(self, default, *options):
        self.all = (default,) + options

        def filter(val):
            if val in self.all:
                return val
            raise ValueError(
                'Invalid value ("%s") for configuration variable "%s". '
                'Valid options are %s' % (val, self.fullname, self.all))
        super(EnumStr, self).__init__(default, filter)

    def __str__(self):
        return '%s (%s)' % (self.fullname, ", ".join(self.all))


class ListParam(ConfigParam):
    """Non-empty list; strings from flags or rc files are "a;b;c", each
    item cast to the type of the default's first item."""

    def __init__(self, default):
        if not isinstance(default, (list, tuple)) or not default:
            raise ValueError("ListParam needs a non-empty list default")
        item_type = type(default[0])

        def filter(val):
            if isinstance(val, str):
                return [item_type(v) for v in val.split(';') if v]
            return list(val)
        super(ListParam, self).__init__(list(default), filter)

    def __str__(self):
        return '%s (list)' % self.fullname


class TypedParam(ConfigParam):
    """Value cast with `mytype`, then checked with `is_valid`."""

    def __init__(self, default, mytype, is_valid=None):
        self.mytype = mytype

        def filter(val):
            if val is None:
                return val
            cast_val = mytype(val)
            if is_valid is not None and not is_valid(cast_val):
                raise ValueError(
                    'Invalid value (%s) for configuration variable "%s".'
                    % (val, self.fullname))
            return cast_val
        super(TypedParam, self).__init__(default, filter)

    def __str__(self):
        return '%s (%s)' % (self.fullname, self.mytype.__name__)


def StrParam(default, is_valid=None):
    return TypedParam(default, str, is_valid)


def IntParam(default, is_valid=None):
    return TypedParam(default, int, is_valid)


def FloatParam(default, is_valid=None):
    return TypedParam(default, float, is_valid)


def BoolParam(default, is_valid=None):
    return TypedParam(default, parse_bool, is_valid)
