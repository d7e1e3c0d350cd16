#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# sessrec documentation build configuration file.

import os
import sys

# the project root goes first so the source package (and its version) is documented
sys.path.insert(0, os.path.dirname(os.getcwd()))

import sessrec  # noqa: E402

extensions = ['sphinx.ext.autodoc', 'sphinx.ext.viewcode']
templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = u'sessrec'
copyright = u'2026, Michal Hozza'
version = sessrec.__version__
release = sessrec.__version__

exclude_patterns = ['_build']
pygments_style = 'sphinx'

html_theme = 'default'
html_static_path = ['_static']
htmlhelp_basename = 'sessrecdoc'

latex_documents = [
    ('index', 'sessrec.tex', u'sessrec Documentation', u'Michal Hozza', 'manual'),
]
man_pages = [
    ('index', 'sessrec', u'sessrec Documentation', [u'Michal Hozza'], 1),
]
