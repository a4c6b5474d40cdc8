#include <stdio.h>
#include "modalprompt.h"

int main(void) {
    MpMatrix *m = NULL;
    MpReport *r = NULL;
    double v = 0.0;
    size_t failed = 0;
    if (mp_matrix_fixture("modalprompt-reference", &m) != MP_STATUS_OK) return 1;
    if (mp_report_new(m, &r) != MP_STATUS_OK) return 2;
    if (mp_report_value(r, "last.mean", &v) != MP_STATUS_OK) return 3;
    printf("last.mean %.2f\n", v);
    if (mp_report_check_fixture(r, "modalprompt-reference", &failed) != MP_STATUS_OK || failed != 0) return 4;
    if (mp_report_value(r, "bogus", &v) != MP_STATUS_INVALID_ARGUMENT) return 5;
    char msg[128];
    mp_last_error(msg, sizeof msg);
    printf("error: %s\n", msg);
    mp_report_free(r);
    mp_matrix_free(m);
    return 0;
}
