# -*- coding: utf-8 -*-
#
# dashattn documentation build configuration file.
#
# This file is execfile()d with the current directory set to its containing dir.

import importlib.machinery
import os
import sys
import sphinx

# Modules to document with autodoc live one directory up.
sys.path.insert(0, os.path.abspath('../'))

# -- General configuration -----------------------------------------------------

if sphinx.__version__ < "1.4":
    raise RuntimeError("Sphinx 1.4 or newer is required")

needs_sphinx = '1.4'

extensions = ['sphinx.ext.autodoc',
              'sphinx.ext.viewcode',
              'sphinx.ext.intersphinx',
              'sphinx.ext.doctest',
              'numpydoc',
              'sphinx.ext.autosummary']

autosummary_generate = True

#--------
# Doctest
#--------

doctest_global_setup = """
import numpy as np
import scipy
import dashattn
np.set_printoptions(precision=3, linewidth=64, edgeitems=2, threshold=200)
"""

numpydoc_show_class_members = False

intersphinx_mapping = {'python': ('https://docs.python.org/3', None),
                       'numpy': ('https://numpy.org/doc/stable/', None),
                       'np': ('https://numpy.org/doc/stable/', None),
                       'scipy': ('https://docs.scipy.org/doc/scipy/', None),
                       'pandas': ('https://pandas.pydata.org/docs/', None),
                       'joblib': ('https://joblib.readthedocs.io/en/latest/',
                                  None)}

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

# General information about the project.
project = u'dashattn'
copyright = u'2026, dashattn development team'

version_module = importlib.machinery.SourceFileLoader(
    'dashattn.version', '../dashattn/version.py').load_module()
# The short X.Y version.
version = version_module.short_version
# The full version, including alpha/beta/rc tags.
release = version_module.version

exclude_patterns = ['_build']
default_role = 'autolink'
add_function_parentheses = False
add_module_names = True
show_authors = False
pygments_style = 'sphinx'

# -- Options for HTML output ---------------------------------------------------

on_rtd = os.environ.get('READTHEDOCS', None) == 'True'
if on_rtd:
    html_theme = 'default'
else:
    import sphinx_rtd_theme
    html_theme = 'sphinx_rtd_theme'
    html_theme_path = [sphinx_rtd_theme.get_html_theme_path()]

html_static_path = ['_static']
html_domain_indices = True
html_use_index = True
html_use_modindex = True
htmlhelp_basename = 'dashattndoc'

man_pages = [
    ('index', 'dashattn', u'dashattn Documentation',
     [u'The dashattn development team'], 1)
]

autodoc_member_order = 'bysource'
