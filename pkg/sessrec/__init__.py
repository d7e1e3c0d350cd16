# -*- coding: utf-8 -*-

__author__ = 'Michal Hozza'
__email__ = 'mhozza@gmail.com'
__version__ = '0.1.0'

version_string = 'sessrec %s' % __version__
